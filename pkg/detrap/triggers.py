"""Debug trigger unit.

Triggers are configured through ``tselect``/``tdata1``/``tdata2``/``tdata3`` with
write-any-read-legal semantics and are evaluated against one full instruction context, so a
chain only fires when every trigger in it matches the same instruction.

tdata1 packing::

    [31:28] type (2 = match control)
    [27]    enabled
    [26:24] target
    [23:21] relation
    [20]    chain

tdata2 holds the compare value and tdata3 the mask for the MASK relation.
"""
import copy
import enum
from dataclasses import dataclass

from .isa import CSRS


__all__ = [
    'Target', 'Relation', 'AccessKind', 'MemAccess', 'InstrContext', 'TriggerConfig', 'TriggerHit',
    'TriggerFile', 'legalize_tdata1', 'write_trigger_csr', 'read_trigger_csr', 'evaluate',
    'TRIGGER_TYPE', 'DEFAULT_COUNT', 'DEFAULT_MAX_CHAIN',
    ]


TRIGGER_TYPE = 2
DEFAULT_COUNT = 4
DEFAULT_MAX_CHAIN = 2

_ENABLED_BIT = 1 << 27
_CHAIN_BIT = 1 << 20


class _Labeled(enum.IntEnum):
    @property
    def label(self):
        return self.name.replace('_', '-')

    @classmethod
    def from_label(cls, label):
        if isinstance(label, cls):
            return label
        if isinstance(label, int):
            return cls(label)
        return cls[str(label).strip().upper().replace('-', '_')]


class Target(_Labeled):
    EXEC_PC = 0
    EXEC_OPCODE = 1
    LOAD_ADDR = 2
    STORE_ADDR = 3
    LOAD_DATA = 4
    STORE_DATA = 5


class Relation(_Labeled):
    EQ = 0
    NEQ = 1
    GEQ = 2
    LT = 3
    MASK = 4


class AccessKind(enum.Enum):
    LOAD = 'load'
    STORE = 'store'


@dataclass(frozen=True)
class MemAccess:
    kind: AccessKind
    address: int
    data: int = 0


@dataclass(frozen=True)
class InstrContext:
    """Everything the triggers may observe about one instruction."""
    pc: int
    opcode: int = 0
    access: MemAccess = None


@dataclass(frozen=True)
class TriggerHit:
    index: int
    length: int


@dataclass(frozen=True)
class TriggerConfig:
    target: Target = Target.EXEC_PC
    relation: Relation = Relation.EQ
    compare: int = 0
    mask: int = 0xFFFFFFFF
    chain: bool = False
    enabled: bool = True

    def tdata1(self):
        """Return the packed tdata1 value for this configuration."""
        value = (TRIGGER_TYPE << 28) | (int(self.target) << 24) | (int(self.relation) << 21)
        if self.enabled:
            value |= _ENABLED_BIT
        if self.chain:
            value |= _CHAIN_BIT
        return value

    @classmethod
    def from_csrs(cls, tdata1, tdata2=0, tdata3=0xFFFFFFFF):
        """Return the configuration described by legalized CSR values (reset values read disabled)."""
        if (tdata1 >> 28) != TRIGGER_TYPE:
            return cls(enabled=False, compare=tdata2, mask=tdata3)
        return cls(target=Target((tdata1 >> 24) & 0x7), relation=Relation((tdata1 >> 21) & 0x7),
                   compare=tdata2, mask=tdata3, chain=bool(tdata1 & _CHAIN_BIT),
                   enabled=bool(tdata1 & _ENABLED_BIT))

    def matches(self, ctx):
        """Return if this trigger's condition holds for the instruction context."""
        if self.target is Target.EXEC_PC:
            value = ctx.pc
        elif self.target is Target.EXEC_OPCODE:
            value = ctx.opcode
        else:
            kind = AccessKind.LOAD if self.target in (Target.LOAD_ADDR, Target.LOAD_DATA) else AccessKind.STORE
            if ctx.access is None or ctx.access.kind is not kind:
                return False
            if self.target in (Target.LOAD_ADDR, Target.STORE_ADDR):
                value = ctx.access.address
            else:
                value = ctx.access.data

        value &= 0xFFFFFFFF
        compare = self.compare & 0xFFFFFFFF
        if self.relation is Relation.EQ:
            return value == compare
        elif self.relation is Relation.NEQ:
            return value != compare
        elif self.relation is Relation.GEQ:
            return value >= compare
        elif self.relation is Relation.LT:
            return value < compare
        return (value & self.mask) == (compare & self.mask)

    def to_dict(self):
        d = {'target': self.target.label, 'relation': self.relation.label,
             'compare': '0x{:08x}'.format(self.compare), 'chain': self.chain}
        if self.relation is Relation.MASK:
            d['mask'] = '0x{:08x}'.format(self.mask)
        return d

    @classmethod
    def from_dict(cls, d):
        compare = d['compare']
        mask = d.get('mask', 0xFFFFFFFF)
        return cls(target=Target.from_label(d['target']), relation=Relation.from_label(d['relation']),
                   compare=int(compare, 0) if isinstance(compare, str) else compare,
                   mask=int(mask, 0) if isinstance(mask, str) else mask,
                   chain=bool(d.get('chain', False)), enabled=bool(d.get('enabled', True)))


def legalize_tdata1(value, index, chain_bits, max_chain=DEFAULT_MAX_CHAIN):
    """Return the legal tdata1 value for a write to trigger `index`.

    Args:
        value (int): Value software tried to write.
        index (int): Trigger index being written.
        chain_bits (list): Current chain flag of every trigger in the file.
        max_chain (int)[2]: Longest allowed chain run.

    Returns:
        value (int): Unsupported type/target/relation collapse to 0, reserved bits are cleared, and the
            chain bit is cleared on the last trigger or when it would build a run longer than `max_chain`.
    """
    value &= 0xFFFFFFFF
    if (value >> 28) != TRIGGER_TYPE:
        return 0
    target = (value >> 24) & 0x7
    relation = (value >> 21) & 0x7
    if target > max(Target) or relation > max(Relation):
        return 0
    value &= (0xF << 28) | _ENABLED_BIT | (0x7 << 24) | (0x7 << 21) | _CHAIN_BIT

    if value & _CHAIN_BIT:
        count = len(chain_bits)
        back = 0
        i = index - 1
        while i >= 0 and chain_bits[i]:
            back += 1
            i -= 1
        forward = 0
        i = index + 1
        while i < count - 1 and chain_bits[i]:
            forward += 1
            i += 1
        if index >= count - 1 or back + 2 + forward > max_chain:
            value &= ~_CHAIN_BIT
    return value


class TriggerFile(object):
    """Ordered set of triggers selected through tselect.

    Args:
        count (int)[4]: Number of triggers.
        max_chain (int)[2]: Longest chain run the hardware supports.
    """
    def __init__(self, count=DEFAULT_COUNT, max_chain=DEFAULT_MAX_CHAIN):
        self.count = count
        self.max_chain = max_chain
        self.tselect = 0
        self.tdata1 = [0] * count
        self.tdata2 = [0] * count
        self.tdata3 = [0xFFFFFFFF] * count

    def copy(self):
        return copy.deepcopy(self)

    @property
    def triggers(self):
        return [self.config(i) for i in range(self.count)]

    def config(self, index):
        return TriggerConfig.from_csrs(self.tdata1[index], self.tdata2[index], self.tdata3[index])

    def chain_bits(self):
        return [bool(v & _CHAIN_BIT) for v in self.tdata1]

    def write_csr(self, csr, value):
        """Write a trigger CSR; the stored value is always legal."""
        csr = self._csr_name(csr)
        value &= 0xFFFFFFFF
        if csr == 'tselect':
            self.tselect = min(value, self.count - 1)
        elif csr == 'tdata1':
            self.tdata1[self.tselect] = legalize_tdata1(value, self.tselect, self.chain_bits(), self.max_chain)
        elif csr == 'tdata2':
            self.tdata2[self.tselect] = value
        else:
            self.tdata3[self.tselect] = value
        return self

    def read_csr(self, csr):
        csr = self._csr_name(csr)
        if csr == 'tselect':
            return self.tselect
        return getattr(self, csr)[self.tselect]

    def install(self, index, config):
        """Program trigger `index` through the CSR interface.

        Returns:
            config (TriggerConfig): Legalized configuration that was stored.
        """
        self.write_csr('tselect', index)
        if self.tselect != index:
            return None
        self.write_csr('tdata2', config.compare)
        self.write_csr('tdata3', config.mask)
        self.write_csr('tdata1', config.tdata1())
        return self.config(index)

    def runs(self):
        """Yield (start, length) for every maximal chain run."""
        i = 0
        while i < self.count:
            start = i
            while i < self.count - 1 and self.tdata1[i] & _CHAIN_BIT:
                i += 1
            yield start, i - start + 1
            i += 1

    def evaluate(self, ctx):
        """Return the lowest-indexed run whose triggers all match `ctx`, or None."""
        configs = self.triggers
        for start, length in self.runs():
            run = configs[start:start + length]
            if all(cfg.enabled and cfg.matches(ctx) for cfg in run):
                return TriggerHit(start, length)
        return None

    @staticmethod
    def _csr_name(csr):
        if isinstance(csr, int):
            for name in ('tselect', 'tdata1', 'tdata2', 'tdata3'):
                if CSRS[name] == csr:
                    return name
            raise KeyError('not a trigger CSR: 0x{:03x}'.format(csr))
        if csr not in ('tselect', 'tdata1', 'tdata2', 'tdata3'):
            raise KeyError('not a trigger CSR: {!r}'.format(csr))
        return csr

    def __repr__(self):
        return '{}(count={}, max_chain={}, tselect={})'.format(
            self.__class__.__name__, self.count, self.max_chain, self.tselect)


def write_trigger_csr(trigger_file, csr, value):
    """Return a copy of the trigger file with the legalized CSR write applied."""
    return trigger_file.copy().write_csr(csr, value)


def read_trigger_csr(trigger_file, csr):
    """Return the legalized value stored in a trigger CSR."""
    return trigger_file.read_csr(csr)


def evaluate(trigger_file, ctx):
    """Return the lowest-indexed firing chain run as a TriggerHit, or None. Evaluation is pure."""
    return trigger_file.evaluate(ctx)
