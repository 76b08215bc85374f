"""Host-level model of the trusted runtime.

The runtime owns every trap: policy trigger hits terminate the program, exceptions in
untrusted code are forwarded to the untrusted handler through a trap frame kept on the
shadow stack, and trusted ``ecall`` services implement exit, setjmp/longjmp and trap return.
"""
import enum
import logging
from dataclasses import dataclass

from . import isa
from .layout import SectionKind
from .triggers import Target, Relation
from .instrument import (SERVICE_EXIT, SERVICE_SETJMP, SERVICE_LONGJMP, SERVICE_SETJMP_RELEASE,
                         SERVICE_TRAP_RETURN)


__all__ = [
    'Violation', 'TrapKind', 'JmpEntry', 'TrustedRuntime', 'FRAME_WORDS', 'FRAME_SIZE',
    'SERVICE_EXIT', 'SERVICE_SETJMP', 'SERVICE_LONGJMP', 'SERVICE_SETJMP_RELEASE', 'SERVICE_TRAP_RETURN',
    'UNHANDLED_EXCEPTION', 'TRAP_RETURN_SYMBOL', 'handle_trap', 'setjmp_record', 'longjmp_apply',
    ]


logger = logging.getLogger(__name__)


class Violation(enum.Enum):
    WRITE = 'WriteViolation'
    SHADOW_OVERFLOW = 'ShadowOverflow'
    TRUSTED_FAULT = 'TrustedFault'
    HANDLER = 'HandlerViolation'
    LONGJMP = 'LongjmpViolation'
    MRET = 'MretViolation'


class TrapKind(enum.Enum):
    EXCEPTION = 'exception'
    INTERRUPT = 'interrupt'


TRAP_RETURN_SYMBOL = '__detrap_trap_return'
UNHANDLED_EXCEPTION = 0x100  # halt code is UNHANDLED_EXCEPTION | cause

# mepc, mcause, x1..x31
FRAME_WORDS = 33
FRAME_SIZE = FRAME_WORDS * 4

_CALLEE_SAVED = (8, 9) + tuple(range(19, 28))  # s0, s1, s3..s11; s2 is the shadow stack pointer
_INTERRUPT_BIT = 0x80000000


@dataclass
class JmpEntry:
    buf_id: int
    pc: int
    sp: int
    ssp: int
    saved: tuple
    valid: bool = True


class TrustedRuntime(object):
    """Trap and service dispatch for one machine.

    Args:
        machine (Machine): Machine whose traps this runtime handles.
    """
    def __init__(self, machine):
        self.machine = machine
        self.in_trap = False
        self.trap_kind = None
        self.frame_address = None
        self.copy_address = None
        self.jmp_map = {}
        self.roles = {}

    # ----- policy -----
    def assign_roles(self, installed):
        """Name the violation each installed trigger run reports when it fires."""
        triggers = self.machine.triggers
        self.roles = {}
        for start, length in triggers.runs():
            if start >= installed:
                break
            cfg = triggers.config(start)
            if length == 1 and cfg.target is Target.STORE_ADDR and cfg.relation is Relation.EQ:
                self.roles[start] = Violation.SHADOW_OVERFLOW
            else:
                self.roles[start] = Violation.WRITE

    def is_policy_trigger(self, index):
        for start, length in self.machine.triggers.runs():
            if start <= index < start + length:
                return start in self.roles
        return False

    @property
    def trap_return_address(self):
        img = self.machine.image
        sym = img.symbol(TRAP_RETURN_SYMBOL) if img is not None else None
        return sym.address if sym is not None else None

    # ----- traps -----
    def handle_trap(self, cause, origin_pc, hit=None, explicit=False):
        """Route one trap.

        Args:
            cause (int): mcause value; interrupts have bit 31 set.
            origin_pc (int): pc of the trapping instruction or the interrupted pc.
            hit (TriggerHit)[None]: Trigger run that raised a breakpoint.
            explicit (bool)[False]: The trap came from ecall/ebreak.
        """
        m = self.machine
        m.counters.traps += 1
        cause = int(cause)
        if hit is not None:
            m.counters.policy_violations += 1
            m.pc = origin_pc
            m.terminate(self.roles.get(hit.index, Violation.WRITE))
            return

        if cause & _INTERRUPT_BIT:
            logger.debug('Interrupt 0x%08x at pc=0x%08x', cause, origin_pc)
            if m.image is None or m.image.handler is None:
                return
            if not self._push_frame(cause, origin_pc):
                return
            self.trap_kind = TrapKind.INTERRUPT
            self._enter_handler(cause)
            return

        logger.debug('Exception %d at pc=0x%08x (explicit=%s)', cause, origin_pc, explicit)
        m.pc = origin_pc
        if m.is_trusted_pc(origin_pc):
            m.terminate(Violation.TRUSTED_FAULT)
        elif self.in_trap:
            m.terminate(Violation.HANDLER)
        elif m.image is None or m.image.handler is None:
            m.halt(UNHANDLED_EXCEPTION | cause)
        elif self._push_frame(cause, origin_pc):
            copy = (m.reg(isa.SP) - FRAME_SIZE) & ~0xF
            if copy < m.map.base(SectionKind.UNTRUSTED_STACK):
                m.terminate(Violation.WRITE)
                return
            m.write_words(copy, m.read_words(self.frame_address, FRAME_WORDS))
            self.copy_address = copy
            self.trap_kind = TrapKind.EXCEPTION
            m.set_reg(isa.SP, copy)
            m.set_reg(11, copy)
            self._enter_handler(cause)

    def _push_frame(self, cause, origin_pc):
        m = self.machine
        address = m.reg(isa.SSP)
        if address < m.map.base(SectionKind.SHADOW_STACK) or address % 4:
            m.terminate(Violation.TRUSTED_FAULT)
            return False
        if address + FRAME_SIZE > m.map.shadow_top_entry:
            m.terminate(Violation.SHADOW_OVERFLOW)
            return False
        m.write_words(address, [origin_pc, cause] + [m.reg(i) for i in range(1, 32)])
        m.csrs['mepc'] = origin_pc
        m.csrs['mcause'] = cause
        self.frame_address = address
        m.set_reg(isa.SSP, address + FRAME_SIZE)
        return True

    def _enter_handler(self, cause):
        m = self.machine
        self.in_trap = True
        m.set_reg(10, cause)
        m.set_reg(isa.RA, self.trap_return_address)
        m.pc = m.image.handler

    def trap_return(self):
        """Leave the untrusted handler. Returns the resume pc or None when execution stops."""
        m = self.machine
        if not self.in_trap:
            m.terminate(Violation.HANDLER)
            return None
        frame = m.read_words(self.frame_address, FRAME_WORDS)
        mepc = frame[0]
        if self.trap_kind is TrapKind.INTERRUPT:
            regs = frame[2:]
            resume = mepc
        else:
            copy = m.read_words(self.copy_address, FRAME_WORDS)
            resume = copy[0]
            if resume not in (mepc, (mepc + 4) & 0xFFFFFFFF):
                m.terminate(Violation.HANDLER)
                return None
            regs = copy[2:]
            regs[isa.RA - 1] = frame[1 + isa.RA]
            regs[isa.SSP - 1] = frame[1 + isa.SSP]
        for i, value in enumerate(regs, 1):
            m.set_reg(i, value)
        self.in_trap = False
        self.trap_kind = None
        self.frame_address = self.copy_address = None
        logger.debug('Trap return to pc=0x%08x', resume)
        return resume

    def mret(self):
        return self.machine.csrs['mepc']

    # ----- services -----
    def service(self, pc):
        """Run the service selected by a7 for an ecall at a trusted pc."""
        m = self.machine
        number = m.reg(17)
        logger.debug('Service 0x%x at pc=0x%08x', number, pc)
        if number == SERVICE_EXIT:
            m.halt(m.reg(10))
            return None
        elif number == SERVICE_SETJMP:
            self.setjmp_record(m.reg(10))
            m.set_reg(10, 0)
        elif number == SERVICE_LONGJMP:
            return self.longjmp_apply(m.reg(10), m.reg(11))
        elif number == SERVICE_SETJMP_RELEASE:
            self.release()
        elif number == SERVICE_TRAP_RETURN:
            return self.trap_return()
        else:
            m.terminate(Violation.TRUSTED_FAULT)
            return None
        return pc + 4

    def setjmp_record(self, buf_id):
        m = self.machine
        entry = JmpEntry(buf_id, m.reg(isa.RA), m.reg(isa.SP), m.reg(isa.SSP),
                         tuple(m.reg(i) for i in _CALLEE_SAVED))
        self.jmp_map[buf_id] = entry
        return entry

    def longjmp_apply(self, buf_id, value=1):
        """Restore a recorded setjmp state. Returns the resume pc or None after a violation."""
        m = self.machine
        entry = self.jmp_map.get(buf_id)
        if entry is None or not entry.valid:
            m.terminate(Violation.LONGJMP)
            return None
        m.set_reg(isa.SP, entry.sp)
        m.set_reg(isa.SSP, entry.ssp)
        for i, saved in zip(_CALLEE_SAVED, entry.saved):
            m.set_reg(i, saved)
        m.set_reg(10, value or 1)
        m.set_reg(isa.RA, entry.pc)
        for other in self.jmp_map.values():
            if other.ssp > entry.ssp:
                other.valid = False
        return entry.pc

    def release(self):
        current = self.machine.reg(isa.SSP)
        for entry in self.jmp_map.values():
            if entry.ssp >= current:
                entry.valid = False

    def valid_entries(self):
        return [entry for entry in self.jmp_map.values() if entry.valid]


def handle_trap(machine, cause, origin_pc, hit=None):
    machine.runtime.handle_trap(cause, origin_pc, hit=hit)
    return machine


def setjmp_record(machine, buf_id):
    return machine.runtime.setjmp_record(buf_id)


def longjmp_apply(machine, buf_id, value=1):
    pc = machine.runtime.longjmp_apply(buf_id, value)
    if pc is not None:
        machine.pc = pc
    return machine
