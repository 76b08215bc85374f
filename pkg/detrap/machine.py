"""Deterministic RV32IM interpreter with the debug trigger unit wired into every step.

Triggers see the complete context of an instruction (pc, opcode and its memory access) and
are evaluated before anything commits, so a hit suppresses the instruction entirely.
"""
import enum
import struct
import logging
from collections import Counter
from dataclasses import dataclass

from . import isa
from .isa import decode, IllegalInstruction, OpClass
from .layout import SectionKind
from .image import Trust
from .triggers import TriggerFile, InstrContext, MemAccess, AccessKind, DEFAULT_COUNT, DEFAULT_MAX_CHAIN
from .runtime import TrustedRuntime, Violation


__all__ = [
    'MachineError', 'LoadError', 'Cause', 'TIMER_INTERRUPT', 'INTERRUPT_BIT', 'MIE_BIT',
    'RunState', 'OutcomeKind', 'StepOutcome', 'Counters', 'Machine', 'load', 'step', 'run', 'inject_interrupt',
    ]


logger = logging.getLogger(__name__)


class MachineError(Exception):
    pass


class LoadError(MachineError):
    def __init__(self, message, code):
        self.code = code
        super().__init__('{} [{}]'.format(message, code))


class Cause(enum.IntEnum):
    MISALIGNED_FETCH = 0
    FETCH_FAULT = 1
    ILLEGAL_INSTRUCTION = 2
    BREAKPOINT = 3
    MISALIGNED_LOAD = 4
    LOAD_FAULT = 5
    MISALIGNED_STORE = 6
    STORE_FAULT = 7
    ECALL = 11


INTERRUPT_BIT = 0x80000000
TIMER_INTERRUPT = INTERRUPT_BIT | 7
MIE_BIT = 1 << 3


class RunState(enum.Enum):
    RUNNING = 'running'
    HALTED = 'halted'
    TERMINATED = 'terminated'


class OutcomeKind(enum.Enum):
    RETIRED = 'retired'
    TRAPPED = 'trapped'
    HALTED = 'halted'
    TERMINATED = 'terminated'


@dataclass(frozen=True)
class StepOutcome:
    kind: OutcomeKind
    cause: int = None
    explicit: bool = False
    hit: object = None


@dataclass
class Counters:
    retired: int = 0
    traps: int = 0
    policy_violations: int = 0


class _Trap(Exception):
    def __init__(self, cause, explicit=False):
        self.cause = cause
        self.explicit = explicit
        super().__init__(cause)


def _s32(value):
    return value - (1 << 32) if value & 0x80000000 else value


class Machine(object):
    """RV32 hart plus memory, trigger file and trusted runtime model.

    Args:
        memory_map (MemoryMap): Memory map; memory covers [0, map.end).
        trigger_count (int)[4]: Number of debug triggers.
        max_chain (int)[2]: Longest trigger chain.
        trace (file)[None]: Text stream receiving one line per retired instruction.
    """
    def __init__(self, memory_map, trigger_count=DEFAULT_COUNT, max_chain=DEFAULT_MAX_CHAIN, trace=None):
        self.map = memory_map
        self.memory = bytearray(memory_map.end)
        self.x = [0] * 32
        self.pc = 0
        self.csrs = {name: 0 for name in ('mstatus', 'mtvec', 'mscratch', 'mepc', 'mcause', 'mtval')}
        self.triggers = TriggerFile(trigger_count, max_chain)
        self.counters = Counters()
        self.profile = Counter()
        self.console = bytearray()
        self.state = RunState.RUNNING
        self.exit_code = None
        self.reason = None
        self.step_limit = False
        self.pending_interrupt = None
        self.image = None
        self.trace = trace
        self.runtime = TrustedRuntime(self)

    # ----- registers and memory -----
    def reg(self, index):
        return self.x[index] if index else 0

    def set_reg(self, index, value):
        if index:
            self.x[index] = value & 0xFFFFFFFF

    @property
    def mie(self):
        return bool(self.csrs['mstatus'] & MIE_BIT)

    def in_memory(self, address, size=4):
        return 0 <= address and address + size <= len(self.memory)

    def read(self, address, size=4):
        return int.from_bytes(self.memory[address:address + size], 'little')

    def write(self, address, value, size=4):
        self.memory[address:address + size] = (value & ((1 << (8 * size)) - 1)).to_bytes(size, 'little')
        if address <= self.map.console_address < address + size:
            self.console.append((value >> (8 * (self.map.console_address - address))) & 0xFF)

    def read_words(self, address, count):
        return list(struct.unpack_from('<{}I'.format(count), self.memory, address))

    def write_words(self, address, words):
        struct.pack_into('<{}I'.format(len(words)), self.memory, address, *[w & 0xFFFFFFFF for w in words])

    def is_trusted_pc(self, pc):
        return self.map.is_privileged(pc)

    # ----- status -----
    def halt(self, code):
        self.state = RunState.HALTED
        self.exit_code = code
        logger.info('Halted with code %d after %d instructions', code, self.counters.retired)

    def terminate(self, reason):
        self.state = RunState.TERMINATED
        self.reason = reason
        logger.info('Terminated: %s at pc=0x%08x after %d instructions', reason.value, self.pc,
                    self.counters.retired)

    def _done_outcome(self):
        if self.state is RunState.HALTED:
            return StepOutcome(OutcomeKind.HALTED)
        return StepOutcome(OutcomeKind.TERMINATED)

    # ----- CSRs -----
    def read_csr(self, csr):
        name = isa.CSR_NAMES.get(csr)
        if name is None:
            raise _Trap(Cause.ILLEGAL_INSTRUCTION)
        if name in ('tselect', 'tdata1', 'tdata2', 'tdata3'):
            return self.triggers.read_csr(name)
        if name in ('mcycle', 'minstret'):
            return self.counters.retired & 0xFFFFFFFF
        return self.csrs[name]

    def write_csr(self, csr, value):
        name = isa.CSR_NAMES[csr]
        if name in ('tselect', 'tdata1', 'tdata2', 'tdata3'):
            before = self.triggers.config(self.triggers.tselect)
            self.triggers.write_csr(name, value)
            after = self.triggers.config(self.triggers.tselect)
            if before != after and self.runtime.is_policy_trigger(self.triggers.tselect):
                logger.warning('Policy trigger %d reprogrammed at pc=0x%08x', self.triggers.tselect, self.pc)
        elif name not in ('mcycle', 'minstret'):
            self.csrs[name] = value & 0xFFFFFFFF

    # ----- execution -----
    def access_of(self, pc, instr):
        """Return (kind, address, size, data) of the memory access an instruction performs or None."""
        cls = instr.opclass
        if cls is OpClass.LOAD:
            size = {'lb': 1, 'lbu': 1, 'lh': 2, 'lhu': 2, 'lw': 4}[instr.name]
            address = (self.reg(instr.rs1) + instr.imm) & 0xFFFFFFFF
            data = self.read(address, size) if self.in_memory(address, size) else 0
            return AccessKind.LOAD, address, size, data
        elif cls is OpClass.STORE:
            size = {'sb': 1, 'sh': 2, 'sw': 4}[instr.name]
            address = (self.reg(instr.rs1) + instr.imm) & 0xFFFFFFFF
            data = self.reg(instr.rs2) & ((1 << (8 * size)) - 1)
            return AccessKind.STORE, address, size, data
        return None

    def step(self):
        """Execute one instruction or take one trap.

        Returns:
            outcome (StepOutcome): Retired, Trapped{cause}, Halted or Terminated.
        """
        if self.state is not RunState.RUNNING:
            return self._done_outcome()

        # trusted code runs with interrupts held off
        if (self.pending_interrupt is not None and self.mie and not self.runtime.in_trap
                and not self.is_trusted_pc(self.pc)):
            cause = self.pending_interrupt
            self.pending_interrupt = None
            self.runtime.handle_trap(cause, self.pc)
            return self._trap_outcome(cause)

        pc = self.pc
        if pc % 4:
            return self._trap(Cause.MISALIGNED_FETCH, pc)
        if not self.in_memory(pc):
            return self._trap(Cause.FETCH_FAULT, pc)
        word = self.read(pc)
        try:
            instr = decode(word)
        except IllegalInstruction:
            return self._trap(Cause.ILLEGAL_INSTRUCTION, pc)

        access = self.access_of(pc, instr)
        mem = None
        if access is not None:
            mem = MemAccess(access[0], access[1], access[3])
        hit = self.triggers.evaluate(InstrContext(pc, word, mem))
        if hit is not None:
            self.runtime.handle_trap(Cause.BREAKPOINT, pc, hit=hit)
            return self._trap_outcome(Cause.BREAKPOINT, hit=hit)

        try:
            next_pc = self.execute(pc, instr, access)
        except _Trap as trap:
            return self._trap(trap.cause, pc, trap.explicit)

        self.counters.retired += 1
        self.profile[pc] += 1
        if self.trace is not None:
            line = 'pc=0x{:08x} instr=0x{:08x}'.format(pc, word)
            if access is not None and access[0] is AccessKind.STORE:
                line += ' store addr=0x{:08x}'.format(access[1])
            self.trace.write(line + '\n')
        if next_pc is not None and self.state is RunState.RUNNING:
            self.pc = next_pc & 0xFFFFFFFF
        if self.state is not RunState.RUNNING:
            return self._done_outcome()
        return StepOutcome(OutcomeKind.RETIRED)

    def _trap(self, cause, pc, explicit=False):
        self.runtime.handle_trap(cause, pc, explicit=explicit)
        return self._trap_outcome(cause, explicit)

    def _trap_outcome(self, cause, explicit=False, hit=None):
        if self.state is not RunState.RUNNING:
            return StepOutcome(OutcomeKind.TERMINATED if self.state is RunState.TERMINATED else OutcomeKind.HALTED,
                               int(cause), explicit, hit)
        return StepOutcome(OutcomeKind.TRAPPED, int(cause), explicit, hit)

    def execute(self, pc, instr, access):
        """Commit one instruction. Returns the next pc, or None when the runtime already set it."""
        name = instr.name
        cls = instr.opclass
        rs1 = self.reg(instr.rs1)
        rs2 = self.reg(instr.rs2)
        imm = instr.imm

        if cls is OpClass.LUI:
            self.set_reg(instr.rd, imm)
        elif cls is OpClass.AUIPC:
            self.set_reg(instr.rd, pc + imm)
        elif cls is OpClass.JAL:
            target = (pc + imm) & 0xFFFFFFFF
            self.set_reg(instr.rd, pc + 4)
            return target
        elif cls is OpClass.JALR:
            target = (rs1 + imm) & 0xFFFFFFFE
            self.set_reg(instr.rd, pc + 4)
            return target
        elif cls is OpClass.BRANCH:
            if self._branch_taken(name, rs1, rs2):
                return pc + imm
        elif cls is OpClass.LOAD:
            kind, address, size, data = access
            if address % size:
                raise _Trap(Cause.MISALIGNED_LOAD)
            if not self.in_memory(address, size):
                raise _Trap(Cause.LOAD_FAULT)
            if name in ('lb', 'lh'):
                data = isa.sext(data, 8 * size)
            self.set_reg(instr.rd, data)
        elif cls is OpClass.STORE:
            kind, address, size, data = access
            if address % size:
                raise _Trap(Cause.MISALIGNED_STORE)
            if not self.in_memory(address, size):
                raise _Trap(Cause.STORE_FAULT)
            self.write(address, data, size)
        elif cls is OpClass.OP_IMM:
            self.set_reg(instr.rd, self._alu(name[:-1] if name != 'sltiu' else 'sltu', rs1, imm & 0xFFFFFFFF))
        elif cls is OpClass.OP:
            self.set_reg(instr.rd, self._alu(name, rs1, rs2))
        elif cls is OpClass.MULDIV:
            self.set_reg(instr.rd, self._muldiv(name, rs1, rs2))
        elif cls is OpClass.CSR:
            self._csr(instr, rs1)
        elif cls is OpClass.SYSTEM:
            if name == 'ebreak':
                raise _Trap(Cause.BREAKPOINT, explicit=True)
            elif name == 'ecall':
                if not self.is_trusted_pc(pc):
                    raise _Trap(Cause.ECALL, explicit=True)
                return self.runtime.service(pc)
            elif name == 'mret':
                if not self.is_trusted_pc(pc):
                    self.terminate(Violation.MRET)
                    return None
                return self.runtime.mret()
        return pc + 4

    @staticmethod
    def _branch_taken(name, a, b):
        if name == 'beq':
            return a == b
        elif name == 'bne':
            return a != b
        elif name == 'blt':
            return _s32(a) < _s32(b)
        elif name == 'bge':
            return _s32(a) >= _s32(b)
        elif name == 'bltu':
            return a < b
        return a >= b

    @staticmethod
    def _alu(name, a, b):
        if name == 'add':
            return a + b
        elif name == 'sub':
            return a - b
        elif name == 'sll':
            return a << (b & 0x1F)
        elif name == 'slt':
            return int(_s32(a) < _s32(b & 0xFFFFFFFF))
        elif name == 'sltu':
            return int(a < (b & 0xFFFFFFFF))
        elif name == 'xor':
            return a ^ b
        elif name == 'srl':
            return a >> (b & 0x1F)
        elif name == 'sra':
            return _s32(a) >> (b & 0x1F)
        elif name == 'or':
            return a | b
        return a & b

    @staticmethod
    def _muldiv(name, a, b):
        sa, sb = _s32(a), _s32(b)
        if name == 'mul':
            return a * b
        elif name == 'mulh':
            return (sa * sb) >> 32
        elif name == 'mulhsu':
            return (sa * b) >> 32
        elif name == 'mulhu':
            return (a * b) >> 32
        elif name == 'div':
            if b == 0:
                return -1
            if sa == -0x80000000 and sb == -1:
                return sa
            return int(abs(sa) // abs(sb)) * (1 if (sa < 0) == (sb < 0) else -1)
        elif name == 'divu':
            return a // b if b else 0xFFFFFFFF
        elif name == 'rem':
            if b == 0:
                return a
            if sa == -0x80000000 and sb == -1:
                return 0
            return sa - sb * (int(abs(sa) // abs(sb)) * (1 if (sa < 0) == (sb < 0) else -1))
        return a % b if b else a

    def _csr(self, instr, rs1):
        old = self.read_csr(instr.csr)
        name = instr.name
        source = instr.imm if name.endswith('i') else rs1
        writes = name in ('csrrw', 'csrrwi') or (instr.imm if name.endswith('i') else instr.rs1) != 0
        if name.startswith('csrrw'):
            new = source
        elif name.startswith('csrrs'):
            new = old | source
        else:
            new = old & ~source
        if writes:
            self.write_csr(instr.csr, new)
        self.set_reg(instr.rd, old)

    # ----- driving -----
    def inject_interrupt(self, cause=TIMER_INTERRUPT):
        """Mark an interrupt pending.

        The interrupt stays pending until MIE is set and the pc is in untrusted code outside a trap.
        """
        if self.state is RunState.RUNNING:
            self.pending_interrupt = cause
        return self

    def run(self, max_steps=100000, interrupts=()):
        """Step until the machine stops or `max_steps` steps were taken.

        Args:
            max_steps (int)[100000]: Step budget; exhausting it sets ``step_limit``.
            interrupts (list)[()]: Retired instruction counts at which a timer interrupt is injected.
        """
        schedule = sorted(interrupts)
        steps = 0
        while self.state is RunState.RUNNING and steps < max_steps:
            while schedule and self.counters.retired >= schedule[0]:
                schedule.pop(0)
                self.inject_interrupt()
            self.step()
            steps += 1
        self.step_limit = self.state is RunState.RUNNING
        return self

    @property
    def status(self):
        if self.state is RunState.RUNNING:
            return 'step-limit' if self.step_limit else 'running'
        return self.state.value

    def summary(self):
        d = {'status': self.status}
        if self.state is RunState.TERMINATED:
            d['reason'] = self.reason.value
        if self.state is RunState.HALTED:
            d['code'] = self.exit_code
        d.update({'retired': self.counters.retired, 'traps': self.counters.traps,
                  'policy_violations': self.counters.policy_violations,
                  'console': self.console.decode('latin-1')})
        return d


def load(img, memory_map, policy, trigger_count=DEFAULT_COUNT, max_chain=DEFAULT_MAX_CHAIN, trace=None):
    """Create a machine running an image.

    Args:
        img (Image): Program image.
        memory_map (MemoryMap): Memory map the image was placed in.
        policy (list): TriggerConfig objects installed from index 0 through the trigger CSRs.
        trigger_count (int)[4]: Number of debug triggers.
        max_chain (int)[2]: Longest trigger chain.
        trace (file)[None]: Stream for the per-instruction trace.

    Returns:
        machine (Machine): pc at the entry point, sp at the top of the untrusted stack, x18 at the
            shadow stack base.

    Raises:
        LoadError: SECTION-OUTSIDE-MAP, MMIO-OVERLAP, ENTRY, NO-TRAP-RETURN or POLICY-TRUNCATED.
    """
    m = Machine(memory_map, trigger_count, max_chain, trace)
    mmio = memory_map.section(SectionKind.MMIO)
    for sec in img.sections:
        if sec.base < mmio.limit and sec.limit > mmio.base and sec.data:
            raise LoadError('section {} overlaps MMIO'.format(sec.name), 'MMIO-OVERLAP')
        placed = memory_map.find(sec.base)
        if sec.data and (placed is None or sec.limit > placed.limit):
            raise LoadError('section {} [0x{:08x}, 0x{:08x}) is outside the memory map'.format(
                sec.name, sec.base, sec.limit), 'SECTION-OUTSIDE-MAP')
        m.memory[sec.base:sec.limit] = sec.data

    entry = img.section_at(img.entry)
    if entry is None or entry.trust is not Trust.TRUSTED or not entry.is_code:
        raise LoadError('entry 0x{:08x} is not in trusted code'.format(img.entry), 'ENTRY')
    if img.handler is not None and img.symbol('__detrap_trap_return') is None:
        raise LoadError('image has a trap handler but no __detrap_trap_return', 'NO-TRAP-RETURN')

    policy = list(policy)
    if len(policy) > trigger_count:
        raise LoadError('policy has {} triggers, the file holds {}'.format(len(policy), trigger_count),
                        'POLICY-TRUNCATED')
    for index, cfg in enumerate(policy):
        stored = m.triggers.install(index, cfg)
        if stored != cfg:
            logger.warning('Trigger %d legalized from %s to %s', index, cfg, stored)
    m.runtime.assign_roles(len(policy))

    m.image = img
    m.pc = img.entry
    m.x[isa.SP] = memory_map.limit(SectionKind.UNTRUSTED_STACK)
    m.x[isa.SSP] = memory_map.base(SectionKind.SHADOW_STACK)
    logger.debug('Loaded image: entry=0x%08x sp=0x%08x ssp=0x%08x', m.pc, m.x[isa.SP], m.x[isa.SSP])
    return m


def step(machine):
    return machine.step()


def run(machine, max_steps=100000, interrupts=()):
    return machine.run(max_steps, interrupts)


def inject_interrupt(machine, cause=TIMER_INTERRUPT):
    return machine.inject_interrupt(cause)
