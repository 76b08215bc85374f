"""Loadable program images and their text form."""
import enum
import struct
from dataclasses import dataclass, field

from .layout import SectionKind


__all__ = [
    'ProgramError', 'ParseError', 'RangeError', 'UnknownSymbol', 'FormatError', 'UnsupportedFeature',
    'SkeletonError', 'Trust', 'SymbolKind', 'ImageSection', 'Symbol', 'JumpTable', 'Image',
    'default_trust', 'emit_image',
    ]


class ProgramError(Exception):
    pass


class ParseError(ProgramError):
    """Error in program or whitelist text.

    Args:
        message (str): Description.
        line (int)[0]: 1-based line number (0 when unknown).
        column (int)[0]: 1-based column number (0 when unknown).
        code (str)['SYNTAX']: Machine readable error code.
    """
    default_code = 'SYNTAX'

    def __init__(self, message, line=0, column=0, code=None):
        self.message = message
        self.line = line
        self.column = column
        self.code = code or self.default_code
        location = '{}:{}: '.format(line, column) if line else ''
        super().__init__('{}{} [{}]'.format(location, message, self.code))


class RangeError(ParseError):
    default_code = 'RANGE'


class UnknownSymbol(ParseError):
    default_code = 'UNKNOWN-SYMBOL'


class FormatError(ProgramError):
    pass


class UnsupportedFeature(ProgramError):
    pass


class SkeletonError(ProgramError):
    pass


class Trust(enum.Enum):
    TRUSTED = 'trusted'
    UNTRUSTED = 'untrusted'


class SymbolKind(enum.Enum):
    FUNCTION = 'function'
    OBJECT = 'object'
    JUMPTABLE = 'jumptable'


def default_trust(kind):
    if kind in (SectionKind.UNTRUSTED_CODE, SectionKind.UNTRUSTED_STACK, SectionKind.UNTRUSTED_DATA):
        return Trust.UNTRUSTED
    return Trust.TRUSTED


@dataclass(frozen=True)
class ImageSection:
    name: str
    kind: SectionKind
    trust: Trust
    base: int
    data: bytes = b''

    @property
    def limit(self):
        return self.base + len(self.data)

    @property
    def is_code(self):
        return self.kind.is_code

    def __contains__(self, address):
        return self.base <= address < self.limit


@dataclass(frozen=True, order=True)
class Symbol:
    address: int
    name: str
    kind: SymbolKind = SymbolKind.FUNCTION


@dataclass(frozen=True, order=True)
class JumpTable:
    base: int
    count: int
    entry_size: int = 4

    @property
    def limit(self):
        return self.base + self.count * self.entry_size

    def entries(self):
        return [self.base + i * self.entry_size for i in range(self.count)]


@dataclass
class Image:
    """Program sections, symbols, jumptables, entry point and optional untrusted trap handler.

    Sections are kept sorted by base, symbols by (address, name) and jumptables by base.
    """
    sections: list = field(default_factory=list)
    symbols: list = field(default_factory=list)
    jumptables: list = field(default_factory=list)
    entry: int = 0
    handler: int = None

    def __post_init__(self):
        self.sections = sorted(self.sections, key=lambda s: (s.base, s.name))
        self.symbols = sorted(self.symbols)
        self.jumptables = sorted(self.jumptables)

    def section_at(self, address):
        for sec in self.sections:
            if address in sec:
                return sec
        return None

    def code_section_at(self, address):
        sec = self.section_at(address)
        if sec is not None and sec.is_code:
            return sec
        return None

    def is_trusted(self, address):
        sec = self.section_at(address)
        return sec is not None and sec.trust is Trust.TRUSTED

    def read_word(self, address):
        """Return the little-endian word at the address or None when it is not fully inside one section."""
        sec = self.section_at(address)
        if sec is None or address + 4 > sec.limit:
            return None
        offset = address - sec.base
        return struct.unpack_from('<I', sec.data, offset)[0]

    def symbol(self, name):
        for sym in self.symbols:
            if sym.name == name:
                return sym
        return None

    def address_of(self, name):
        sym = self.symbol(name)
        if sym is None:
            raise KeyError(name)
        return sym.address

    def symbols_at(self, address):
        return [sym for sym in self.symbols if sym.address == address]

    def functions(self):
        return [sym for sym in self.symbols if sym.kind is SymbolKind.FUNCTION]

    def jumptable_at(self, base):
        for jt in self.jumptables:
            if jt.base == base:
                return jt
        return None

    def problems(self, check_entry=True):
        """Return a list of (code, message) invariant violations.

        Args:
            check_entry (bool)[True]: Also require the entry point to lie in trusted code.
        """
        problems = []
        ordered = self.sections
        for prev, sec in zip(ordered, ordered[1:]):
            if sec.base < prev.limit:
                problems.append(('OVERLAP', 'section {} overlaps {}'.format(prev.name, sec.name)))
        for sym in self.symbols:
            sec = self.section_at(sym.address)
            if sec is None and not any(s.base == sym.address == s.limit for s in self.sections):
                problems.append(('SYMBOL', 'symbol {} at 0x{:08x} is outside every section'.format(
                    sym.name, sym.address)))
        for jt in self.jumptables:
            sec = self.section_at(jt.base)
            if sec is None or jt.limit > sec.limit or sec.kind not in (
                    SectionKind.RODATA, SectionKind.TRUSTED_CODE, SectionKind.UNTRUSTED_CODE):
                problems.append(('JUMPTABLE', 'jumptable 0x{:08x} is not inside rodata or code'.format(jt.base)))
        if check_entry and self.sections:
            sec = self.section_at(self.entry)
            if sec is None or sec.kind is not SectionKind.TRUSTED_CODE:
                problems.append(('ENTRY', 'entry 0x{:08x} is not in trusted code'.format(self.entry)))
        return problems


def _location_name(img, address):
    for sym in img.symbols_at(address):
        return sym.name
    return '0x{:08x}'.format(address)


def emit_image(img):
    """Return the canonical text form of an image.

    The output only uses directives (``.section``, ``.sym``, ``.word``, ``.byte``, ``.jumptable``,
    ``.entry``, ``.handler``), so parsing it back reproduces the image exactly.

    Raises:
        ProgramError: The image breaks one of its invariants.
    """
    problems = img.problems(check_entry=False)
    if problems:
        raise ProgramError('; '.join(message for _, message in problems))

    lines = []
    for sec in img.sections:
        lines.append('.section {} kind={} trust={} base=0x{:08x}'.format(
            sec.name, sec.kind.value, sec.trust.value, sec.base))
        for sym in img.symbols:
            if sec.base <= sym.address < sec.limit or (sym.address == sec.limit and img.section_at(sym.address) is None):
                lines.append('.sym {} 0x{:x} {}'.format(sym.name, sym.address - sec.base, sym.kind.value))
        data = sec.data
        whole = len(data) - len(data) % 4
        for offset in range(0, whole, 4):
            lines.append('.word 0x{:08x}'.format(struct.unpack_from('<I', data, offset)[0]))
        for offset in range(whole, len(data)):
            lines.append('.byte 0x{:02x}'.format(data[offset]))
    for jt in img.jumptables:
        lines.append('.jumptable 0x{:08x} {}'.format(jt.base, jt.count))
    lines.append('.entry {}'.format(_location_name(img, img.entry)))
    if img.handler is not None:
        lines.append('.handler {}'.format(_location_name(img, img.handler)))
    return '\n'.join(lines) + '\n'
