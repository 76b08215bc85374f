"""Memory map planning and the write-protection trigger policy.

Sections are placed from address 0 in a fixed order so the low end of the address space forms
two nested regions::

    [0, privileged_top)      mmio, trusted-code
    [0, write_limited_top)   + rodata, trusted-data, shadow-stack, untrusted-code

Untrusted code may never store below ``write_limited_top``; the lowest non write-limited section
is the untrusted stack, so running off its bottom is caught by the same chain.
"""
import os
import enum
import json
import logging
from dataclasses import dataclass, field

from .triggers import Target, Relation, TriggerConfig


__all__ = [
    'LayoutError', 'SpecError', 'OverlapError', 'ConfigError',
    'SectionKind', 'SECTION_ORDER', 'DEFAULT_SIZES', 'DEFAULT_ALIGN', 'CONSOLE_OFFSET', 'LAYOUT_ENV',
    'SectionSpec', 'PlacedSection', 'MemoryMap', 'LayoutFinding',
    'default_specs', 'plan_layout', 'derive_trigger_policy', 'validate_layout',
    'parse_layout_config', 'load_layout_config', 'load_layout', 'policy_to_dict', 'policy_from_dict',
    ]


logger = logging.getLogger(__name__)


class LayoutError(Exception):
    pass


class SpecError(LayoutError):
    pass


class OverlapError(LayoutError):
    pass


class ConfigError(LayoutError):
    def __init__(self, message, line=0):
        self.line = line
        super().__init__('line {}: {}'.format(line, message) if line else message)


class SectionKind(enum.Enum):
    MMIO = 'mmio'
    TRUSTED_CODE = 'trusted-code'
    RODATA = 'rodata'
    TRUSTED_DATA = 'trusted-data'
    SHADOW_STACK = 'shadow-stack'
    UNTRUSTED_CODE = 'untrusted-code'
    UNTRUSTED_STACK = 'untrusted-stack'
    UNTRUSTED_DATA = 'untrusted-data'

    @property
    def is_code(self):
        return self in (SectionKind.TRUSTED_CODE, SectionKind.UNTRUSTED_CODE)


SECTION_ORDER = tuple(SectionKind)

DEFAULT_SIZES = {
    SectionKind.MMIO: 0x10000,
    SectionKind.TRUSTED_CODE: 0x8000,
    SectionKind.RODATA: 0x4000,
    SectionKind.TRUSTED_DATA: 0x2000,
    SectionKind.SHADOW_STACK: 0x1000,
    SectionKind.UNTRUSTED_CODE: 0x8000,
    SectionKind.UNTRUSTED_STACK: 0x1000,
    SectionKind.UNTRUSTED_DATA: 0x8000,
    }

DEFAULT_ALIGN = 16
CONSOLE_OFFSET = 0x1000  # console output word inside the mmio section
LAYOUT_ENV = 'DETRAP_LAYOUT'


def _align_up(value, align):
    return (value + align - 1) & ~(align - 1)


@dataclass(frozen=True)
class SectionSpec:
    kind: SectionKind
    size: int
    align: int = DEFAULT_ALIGN
    name: str = None

    def __post_init__(self):
        if not isinstance(self.kind, SectionKind):
            object.__setattr__(self, 'kind', SectionKind(self.kind))
        if self.name is None:
            object.__setattr__(self, 'name', self.kind.value)


@dataclass(frozen=True)
class PlacedSection:
    name: str
    kind: SectionKind
    base: int
    limit: int  # exclusive
    align: int = DEFAULT_ALIGN

    @property
    def size(self):
        return self.limit - self.base

    def __contains__(self, address):
        return self.base <= address < self.limit


@dataclass(frozen=True)
class LayoutFinding:
    code: str
    message: str


@dataclass(frozen=True)
class MemoryMap:
    """Placed sections plus the derived region boundaries."""
    sections: tuple
    address_space_bits: int = 32

    def __post_init__(self):
        object.__setattr__(self, 'sections', tuple(self.sections))

    def section(self, kind):
        """Return the first placed section of the given kind.

        Raises:
            KeyError: The map has no section of that kind.
        """
        kind = SectionKind(kind)
        for sec in self.sections:
            if sec.kind is kind:
                return sec
        raise KeyError(kind.value)

    def base(self, kind):
        return self.section(kind).base

    def limit(self, kind):
        return self.section(kind).limit

    @property
    def privileged_top(self):
        return self.base(SectionKind.UNTRUSTED_CODE)

    @property
    def write_limited_top(self):
        return self.base(SectionKind.UNTRUSTED_STACK)

    @property
    def shadow_top_entry(self):
        return self.limit(SectionKind.SHADOW_STACK) - 4

    @property
    def console_address(self):
        return self.base(SectionKind.MMIO) + CONSOLE_OFFSET

    @property
    def end(self):
        return max((sec.limit for sec in self.sections), default=0)

    def find(self, address):
        """Return the section containing the address or None."""
        for sec in self.sections:
            if address in sec:
                return sec
        return None

    def is_privileged(self, address):
        return 0 <= address < self.privileged_top

    def is_write_limited(self, address):
        return 0 <= address < self.write_limited_top

    def to_dict(self):
        return {
            'address_space_bits': self.address_space_bits,
            'sections': [{'name': sec.name, 'kind': sec.kind.value, 'base': '0x{:08x}'.format(sec.base),
                          'limit': '0x{:08x}'.format(sec.limit), 'align': sec.align}
                         for sec in self.sections],
            'privileged_top': '0x{:08x}'.format(self.privileged_top),
            'write_limited_top': '0x{:08x}'.format(self.write_limited_top),
            'shadow_top_entry': '0x{:08x}'.format(self.shadow_top_entry),
            }

    @classmethod
    def from_dict(cls, d):
        """Load a map from its JSON form. Derived boundaries are recomputed, not read.

        Raises:
            ConfigError: Missing or malformed fields.
        """
        try:
            sections = []
            for item in d['sections']:
                base, limit = item['base'], item['limit']
                sections.append(PlacedSection(
                    name=item.get('name', item['kind']), kind=SectionKind(item['kind']),
                    base=int(base, 0) if isinstance(base, str) else int(base),
                    limit=int(limit, 0) if isinstance(limit, str) else int(limit),
                    align=int(item.get('align', DEFAULT_ALIGN))))
            return cls(tuple(sections), int(d.get('address_space_bits', 32)))
        except (KeyError, TypeError, ValueError) as err:
            raise ConfigError('invalid memory map: {}'.format(err)) from err


def default_specs():
    """Return the default section specs in placement order."""
    return [SectionSpec(kind, DEFAULT_SIZES[kind]) for kind in SECTION_ORDER]


def plan_layout(specs, address_space_bits=32):
    """Place one section of every kind from address 0 in the fixed order.

    Args:
        specs (list): SectionSpec for every kind (any order).
        address_space_bits (int)[32]: Width of the address space.

    Returns:
        map (MemoryMap): Contiguous placement, each base rounded up to the section alignment.

    Raises:
        SpecError: Missing or duplicate kind, size not a positive multiple of 4, bad alignment.
        OverlapError: The sections do not fit the address space.
    """
    by_kind = {}
    for spec in specs:
        if spec.kind in by_kind:
            raise SpecError('duplicate section kind {!r}'.format(spec.kind.value))
        if spec.size <= 0 or spec.size % 4:
            raise SpecError('section {!r} size {} must be a positive multiple of 4'.format(spec.name, spec.size))
        if spec.align < 4 or spec.align & (spec.align - 1):
            raise SpecError('section {!r} alignment {} must be a power of two >= 4'.format(spec.name, spec.align))
        by_kind[spec.kind] = spec

    missing = [kind.value for kind in SECTION_ORDER if kind not in by_kind]
    if missing:
        raise SpecError('missing section kinds: {}'.format(', '.join(missing)))

    space = 1 << address_space_bits
    address = 0
    placed = []
    for kind in SECTION_ORDER:
        spec = by_kind[kind]
        base = _align_up(address, spec.align)
        limit = base + spec.size
        if limit > space:
            raise OverlapError('section {!r} [0x{:x}, 0x{:x}) does not fit a {}-bit address space'.format(
                spec.name, base, limit, address_space_bits))
        placed.append(PlacedSection(spec.name, kind, base, limit, spec.align))
        address = limit
    return MemoryMap(tuple(placed), address_space_bits)


def derive_trigger_policy(memory_map):
    """Return the three policy triggers.

    * T0 chained to T1: stores below the untrusted stack from pc >= untrusted code.
    * T2: any store to the last shadow stack entry.
    """
    return [
        TriggerConfig(Target.EXEC_PC, Relation.GEQ, memory_map.privileged_top, chain=True),
        TriggerConfig(Target.STORE_ADDR, Relation.LT, memory_map.write_limited_top),
        TriggerConfig(Target.STORE_ADDR, Relation.EQ, memory_map.shadow_top_entry),
        ]


def validate_layout(memory_map):
    """Re-check the map invariants, returning a list of LayoutFinding (empty when valid)."""
    findings = []
    kinds = [sec.kind for sec in memory_map.sections]
    for kind in SECTION_ORDER:
        count = kinds.count(kind)
        if count == 0:
            findings.append(LayoutFinding('MISSING', 'no {} section'.format(kind.value)))
        elif count > 1:
            findings.append(LayoutFinding('DUPLICATE', '{} {} sections'.format(count, kind.value)))

    space = 1 << memory_map.address_space_bits
    for sec in memory_map.sections:
        if sec.limit <= sec.base or sec.size % 4:
            findings.append(LayoutFinding('SIZE', '{} size 0x{:x} is not a positive multiple of 4'.format(
                sec.name, sec.limit - sec.base)))
        if sec.align <= 0 or sec.align & (sec.align - 1) or sec.base % sec.align:
            findings.append(LayoutFinding('ALIGNMENT', '{} base 0x{:x} is not aligned to {}'.format(
                sec.name, sec.base, sec.align)))
        if sec.base < 0 or sec.limit > space:
            findings.append(LayoutFinding('BOUNDS', '{} [0x{:x}, 0x{:x}) is outside the address space'.format(
                sec.name, sec.base, sec.limit)))
        if sec.kind is SectionKind.MMIO and sec.base != 0:
            findings.append(LayoutFinding('MMIO-ANCHOR', 'mmio base 0x{:x} is not 0'.format(sec.base)))

    ordered = sorted(memory_map.sections, key=lambda s: (s.base, s.limit))
    rank = {kind: i for i, kind in enumerate(SECTION_ORDER)}
    for prev, sec in zip(ordered, ordered[1:]):
        if sec.base < prev.limit:
            findings.append(LayoutFinding('OVERLAP', '{} overlaps {}'.format(prev.name, sec.name)))
        elif sec.base - prev.limit >= sec.align:
            findings.append(LayoutFinding('CONTIGUITY', 'gap of 0x{:x} bytes between {} and {}'.format(
                sec.base - prev.limit, prev.name, sec.name)))
        if rank[sec.kind] < rank[prev.kind]:
            findings.append(LayoutFinding('ORDERING', '{} is placed above {}'.format(prev.name, sec.name)))
    return findings


def _parse_int(text, line):
    try:
        return int(text.strip(), 0)
    except ValueError:
        raise ConfigError('invalid integer {!r}'.format(text.strip()), line) from None


def parse_layout_config(text):
    """Parse the flat key=value layout config.

    Keys are ``section.<kind>.size``, ``section.<kind>.align`` and ``address_space_bits``.
    Blank lines and ``#`` comments are ignored.

    Returns:
        specs (list): SectionSpec in placement order (only kinds that were given a size).
        address_space_bits (int): Address space width.

    Raises:
        ConfigError: Syntax errors, unknown keys or kinds, and ``align`` without ``size``.
    """
    sizes = {}
    aligns = {}
    bits = 32
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError('expected key=value', lineno)
        key, value = (part.strip() for part in line.split('=', 1))
        if key == 'address_space_bits':
            bits = _parse_int(value, lineno)
            continue
        parts = key.split('.')
        if len(parts) != 3 or parts[0] != 'section' or parts[2] not in ('size', 'align'):
            raise ConfigError('unknown key {!r}'.format(key), lineno)
        try:
            kind = SectionKind(parts[1])
        except ValueError:
            raise ConfigError('unknown section kind {!r}'.format(parts[1]), lineno) from None
        target = sizes if parts[2] == 'size' else aligns
        if kind in target:
            raise ConfigError('duplicate key {!r}'.format(key), lineno)
        target[kind] = _parse_int(value, lineno)

    for kind in aligns:
        if kind not in sizes:
            raise ConfigError('section.{}.align given without a size'.format(kind.value))
    specs = [SectionSpec(kind, sizes[kind], aligns.get(kind, DEFAULT_ALIGN)) for kind in SECTION_ORDER
             if kind in sizes]
    return specs, bits


def load_layout_config(path=None):
    """Return the layout config text from `path`, the DETRAP_LAYOUT file, or the bundled default."""
    if path is None:
        path = os.environ.get(LAYOUT_ENV) or None
    if path is not None:
        logger.debug('Reading layout config %s', path)
        try:
            with open(path, 'r') as f:
                return f.read()
        except OSError as err:
            raise ConfigError('cannot read layout config {}: {}'.format(path, err)) from err

    from .resources import get_text
    return get_text('default_layout')


def load_layout(path=None):
    """Plan the memory map described by a layout config (see load_layout_config for resolution).

    A file holding a saved JSON map is also accepted.
    """
    text = load_layout_config(path)
    if text.lstrip().startswith('{'):
        try:
            data = json.loads(text)
        except ValueError as err:
            raise ConfigError('invalid JSON map: {}'.format(err)) from err
        return MemoryMap.from_dict(data.get('map', data))
    specs, bits = parse_layout_config(text)
    return plan_layout(specs, bits)


def policy_to_dict(policy):
    return {'triggers': [cfg.to_dict() for cfg in policy]}


def policy_from_dict(d):
    return [TriggerConfig.from_dict(item) for item in d['triggers']]
