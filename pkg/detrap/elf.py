"""ELF32 RISC-V executable ingestion."""
import io
import logging

from elftools.common.exceptions import ELFError
from elftools.elf.elffile import ELFFile
from elftools.elf.constants import SH_FLAGS, P_FLAGS
from elftools.elf.sections import SymbolTableSection

from .layout import SectionKind
from .image import FormatError, UnsupportedFeature, Trust, SymbolKind, ImageSection, Symbol, JumpTable, Image


__all__ = ['TRUSTED_PREFIX', 'JUMPTABLE_PREFIX', 'HANDLER_SYMBOL', 'is_elf', 'load_elf32']


logger = logging.getLogger(__name__)

TRUSTED_PREFIX = '.trusted'
JUMPTABLE_PREFIX = '__jt_'
HANDLER_SYMBOL = '__detrap_handler'


def is_elf(data):
    return data[:4] == b'\x7fELF'


def _section_kind(name, trusted, executable, writable):
    if executable:
        return SectionKind.TRUSTED_CODE if trusted else SectionKind.UNTRUSTED_CODE
    if 'shadow' in name:
        return SectionKind.SHADOW_STACK
    if 'mmio' in name:
        return SectionKind.MMIO
    if writable:
        if trusted:
            return SectionKind.TRUSTED_DATA
        return SectionKind.UNTRUSTED_STACK if 'stack' in name else SectionKind.UNTRUSTED_DATA
    return SectionKind.RODATA


def _open(data):
    if not is_elf(data):
        raise FormatError('not an ELF file (bad magic)')
    try:
        elf = ELFFile(io.BytesIO(data))
    except (ELFError, ValueError, Exception) as err:
        raise FormatError('malformed ELF file: {}'.format(err)) from err
    if elf.elfclass != 32:
        raise FormatError('ELF{} input, expected ELF32'.format(elf.elfclass))
    if not elf.little_endian:
        raise FormatError('big-endian ELF input')
    if elf['e_machine'] != 'EM_RISCV':
        raise FormatError('ELF machine {} is not RISC-V'.format(elf['e_machine']))
    if elf['e_type'] != 'ET_EXEC':
        raise FormatError('ELF type {} is not an executable'.format(elf['e_type']))
    return elf


def load_elf32(data):
    """Load a little-endian ELF32 RISC-V executable into an Image.

    Allocated sections become image sections; a section is trusted iff its name starts with
    ``.trusted``. Without section headers every PT_LOAD segment becomes an untrusted section.
    Function and object symbols are imported and ``__jt_*`` symbols describe jumptables
    (``st_size`` bytes of 4-byte entries). A ``__detrap_handler`` symbol sets the untrusted trap
    handler.

    Raises:
        FormatError: Bad magic, class, endianness, machine or file type.
        UnsupportedFeature: The file carries relocation sections.
    """
    elf = _open(data)
    try:
        return _load(elf)
    except (FormatError, UnsupportedFeature):
        raise
    except (ELFError, ValueError, Exception) as err:
        raise FormatError('malformed ELF file: {}'.format(err)) from err


def _load(elf):
    sections = []
    symbols = []
    jumptables = []
    handler = None

    for sec in elf.iter_sections():
        if sec['sh_type'] in ('SHT_REL', 'SHT_RELA'):
            raise UnsupportedFeature('relocation section {} present'.format(sec.name))

    for sec in elf.iter_sections():
        flags = sec['sh_flags']
        if not flags & SH_FLAGS.SHF_ALLOC or sec['sh_size'] == 0:
            continue
        trusted = sec.name.startswith(TRUSTED_PREFIX)
        kind = _section_kind(sec.name, trusted, flags & SH_FLAGS.SHF_EXECINSTR, flags & SH_FLAGS.SHF_WRITE)
        if sec['sh_type'] == 'SHT_NOBITS':
            body = bytes(sec['sh_size'])
        else:
            body = sec.data()
        sections.append(ImageSection(sec.name, kind, Trust.TRUSTED if trusted else Trust.UNTRUSTED,
                                     sec['sh_addr'], bytes(body)))

    if not sections:
        for i, seg in enumerate(elf.iter_segments()):
            if seg['p_type'] != 'PT_LOAD' or seg['p_memsz'] == 0:
                continue
            body = seg.data() + bytes(seg['p_memsz'] - seg['p_filesz'])
            kind = _section_kind('', False, seg['p_flags'] & P_FLAGS.PF_X, seg['p_flags'] & P_FLAGS.PF_W)
            sections.append(ImageSection('segment{}'.format(i), kind, Trust.UNTRUSTED, seg['p_vaddr'], bytes(body)))

    for sec in elf.iter_sections():
        if not isinstance(sec, SymbolTableSection):
            continue
        for sym in sec.iter_symbols():
            if not sym.name:
                continue
            sym_type = sym['st_info']['type']
            address = sym['st_value']
            if not any(s.base <= address <= s.limit for s in sections):
                continue
            if sym.name.startswith(JUMPTABLE_PREFIX):
                symbols.append(Symbol(address, sym.name, SymbolKind.JUMPTABLE))
                if sym['st_size'] >= 4:
                    jumptables.append(JumpTable(address, sym['st_size'] // 4))
            elif sym_type == 'STT_FUNC':
                symbols.append(Symbol(address, sym.name, SymbolKind.FUNCTION))
            elif sym_type == 'STT_OBJECT':
                symbols.append(Symbol(address, sym.name, SymbolKind.OBJECT))
            if sym.name == HANDLER_SYMBOL:
                handler = address

    img = Image(sections, symbols, jumptables, entry=elf['e_entry'], handler=handler)
    problems = img.problems(check_entry=False)
    if problems:
        raise FormatError('; '.join(message for _, message in problems))
    logger.debug('Loaded ELF image: %d sections, %d symbols, entry 0x%08x',
                 len(sections), len(symbols), img.entry)
    return img
