import pytest

import programs


JUMPTABLE_PROGRAM = '''
.section .trusted.text kind=trusted-code base=auto
.sym _start . function
_start:
    j _start
.sym __detrap_trap_return . function
__detrap_trap_return:
    j __detrap_trap_return
.section .text kind=untrusted-code base=auto
.sym __detrap_handler . function
__detrap_handler:
    ret
.section .rodata kind=rodata base=auto
.sym __jt_pick . jumptable
__jt_pick:
    .word __detrap_handler, __detrap_handler, __detrap_handler
.jumptable __jt_pick 3
.entry _start
'''


def hello_image():
    from detrap.assembler import assemble
    from detrap.resources import get_text

    return assemble(get_text('hello'), programs.default_map())


def test_assemble_directives():
    from detrap.assembler import assemble
    from detrap.isa import encode, make
    from detrap.image import JumpTable, SymbolKind

    source = '\n'.join([
        '.section .text kind=untrusted-code base=auto',
        '.sym f . function',
        'f:',
        '    li a0, 0x12345678',
        '    la a1, table',
        '    ret',
        '    .align 16',
        'table:',
        '    .word f, f+4',
        '    .byte 1, 2',
        '    .space 2',
        '.jumptable table 2',
        '.section .trusted.text kind=trusted-code base=auto',
        '.sym _start . function',
        '_start:',
        '    j _start',
        '.entry _start',
        ])
    img = assemble(source, programs.default_map())

    assert img.address_of('f') == 0x1F000
    assert img.symbol('f').kind is SymbolKind.FUNCTION
    assert img.symbol('table') is None  # labels are not symbols
    assert img.entry == 0x10000
    assert img.is_trusted(0x10000) and not img.is_trusted(0x1F000)

    assert img.read_word(0x1F000) == encode(make('lui', 'a0', imm=0x12345000))
    assert img.read_word(0x1F004) == encode(make('addi', 'a0', 'a0', imm=0x678))
    assert img.read_word(0x1F008) == encode(make('auipc', 'a1', imm=0))
    assert img.read_word(0x1F00C) == encode(make('addi', 'a1', 'a1', imm=0x18))
    assert img.read_word(0x1F020) == 0x1F000
    assert img.read_word(0x1F024) == 0x1F004

    text = img.section_at(0x1F000)
    assert text.data[40:44] == b'\x01\x02\x00\x00'
    assert text.limit == 0x1F02C
    assert img.read_word(0x1F02C) is None
    assert img.jumptables == [JumpTable(0x1F020, 2)]
    assert img.jumptables[0].entries() == [0x1F020, 0x1F024]


def test_assemble_errors():
    from detrap.assembler import assemble
    from detrap.image import ParseError, RangeError, UnknownSymbol

    text = '.section .text kind=untrusted-code base=1f000\n'
    cases = [
        (text + '    frobnicate a0\n', ParseError, 'MNEMONIC', 2),
        ('    addi a0, a0, 1\n', ParseError, 'NO-SECTION', 1),
        (text + '    j nowhere\n', UnknownSymbol, 'UNKNOWN-SYMBOL', 2),
        (text + '    addi a0, a0, 5000\n', RangeError, 'RANGE', 2),
        (text + '    lui a0, 0x100000\n', RangeError, 'RANGE', 2),
        (text + '    .word 0x100000000\n', RangeError, 'RANGE', 2),
        (text + 'x:\n    nop\nx:\n', ParseError, 'DUPLICATE', 4),
        (text + '    sw a0, 4\n', ParseError, 'SYNTAX', 2),
        (text + '    add a0, a1\n', ParseError, 'SYNTAX', 2),
        (text + '    .byte 1\n    nop\n', ParseError, 'ALIGN', 3),
        (text + '    nop\n.section .more kind=untrusted-code base=1f000\n    nop\n', ParseError, 'OVERLAP', 3),
        ]
    for source, cls, code, line in cases:
        with pytest.raises(cls) as info:
            assemble(source)
        assert info.value.code == code, (source, info.value)
        assert info.value.line == line, (source, info.value)

    with pytest.raises(ParseError) as info:
        assemble('.section .text kind=untrusted-code base=auto\n    nop\n')
    assert info.value.code == 'NO-MAP'

    with pytest.raises(ParseError):
        assemble('.section .text kind=nowhere base=1f000\n')


def test_image_text_round_trip():
    from detrap.assembler import assemble, parse_image
    from detrap.image import emit_image
    from detrap.resources import get_text

    sources = [
        get_text('hello'),
        programs.untrusted_program(['    li a0, 3', '    ret'], data={'words': ['1', '2', 'main']},
                                   handler=['    ret']),
        JUMPTABLE_PROGRAM,
        ]
    for source in sources:
        img = assemble(source, programs.default_map())
        text = emit_image(img)
        again = parse_image(text)
        assert again == img
        assert emit_image(again) == text

    img = assemble(JUMPTABLE_PROGRAM, programs.default_map())
    text = emit_image(img)
    assert '.jumptable 0x00018000 3' in text
    assert '.entry _start' in text
    assert '.sym __jt_pick 0x0 jumptable' in text


def test_image_problems():
    from detrap.layout import SectionKind
    from detrap.image import Image, ImageSection, Symbol, JumpTable, Trust, ProgramError, emit_image

    code = ImageSection('.text', SectionKind.UNTRUSTED_CODE, Trust.UNTRUSTED, 0x1F000, bytes(8))
    data = ImageSection('.data', SectionKind.UNTRUSTED_DATA, Trust.UNTRUSTED, 0x28000, bytes(8))
    img = Image([data, code], [Symbol(0x30000, 'lost')], [JumpTable(0x28000, 2)], entry=0x1F000)
    assert [s.name for s in img.sections] == ['.text', '.data']
    assert sorted(c for c, _ in img.problems()) == ['ENTRY', 'JUMPTABLE', 'SYMBOL']
    assert sorted(c for c, _ in img.problems(check_entry=False)) == ['JUMPTABLE', 'SYMBOL']

    overlapping = Image([code, ImageSection('.more', SectionKind.UNTRUSTED_CODE, Trust.UNTRUSTED, 0x1F004,
                                            bytes(4))])
    assert [c for c, _ in overlapping.problems(check_entry=False)] == ['OVERLAP']
    with pytest.raises(ProgramError):
        emit_image(overlapping)


def test_elf_round_trip():
    from detrap.elf import load_elf32, is_elf
    from detrap.image import Trust

    img = hello_image()
    data = programs.write_elf32(img)
    assert is_elf(data)

    loaded = load_elf32(data)
    assert [(s.name, s.kind, s.base, s.data) for s in loaded.sections] == \
           [(s.name, s.kind, s.base, s.data) for s in img.sections]
    assert {s.name: s.trust for s in loaded.sections} == {
        '.trusted.text': Trust.TRUSTED, '.rodata': Trust.UNTRUSTED, '.text': Trust.UNTRUSTED}
    assert loaded.symbols == img.symbols
    assert loaded.entry == img.entry
    assert loaded.handler is None

    m = programs.boot(loaded).run(200000)
    assert m.status == 'halted' and m.exit_code == 0
    assert bytes(m.console) == b'hello\n'


def test_elf_jumptables_and_handler():
    from detrap.assembler import assemble
    from detrap.elf import load_elf32
    from detrap.image import JumpTable, SymbolKind

    img = assemble(JUMPTABLE_PROGRAM, programs.default_map())
    loaded = load_elf32(programs.write_elf32(img))
    assert loaded.jumptables == [JumpTable(0x18000, 3)]
    assert loaded.symbol('__jt_pick').kind is SymbolKind.JUMPTABLE
    assert loaded.handler == 0x1F000


def test_elf_segments_only():
    from detrap.elf import load_elf32
    from detrap.layout import SectionKind, derive_trigger_policy
    from detrap.image import Trust
    from detrap.machine import load, LoadError

    loaded = load_elf32(programs.write_elf32(hello_image(), with_sections=False))
    assert [s.name for s in loaded.sections] == ['segment0', 'segment1', 'segment2']
    assert [s.kind for s in loaded.sections] == [SectionKind.UNTRUSTED_CODE, SectionKind.RODATA,
                                                 SectionKind.UNTRUSTED_CODE]
    assert all(s.trust is Trust.UNTRUSTED for s in loaded.sections)
    assert loaded.symbols == []

    memory_map = programs.default_map()
    with pytest.raises(LoadError) as info:
        load(loaded, memory_map, derive_trigger_policy(memory_map))
    assert info.value.code == 'ENTRY'


def test_elf_rejects():
    from detrap.elf import load_elf32
    from detrap.image import FormatError, UnsupportedFeature

    img = hello_image()
    good = programs.write_elf32(img)

    bad = [
        b'\x00' + good[1:],
        good[:4] + b'\x02' + good[5:],          # ELF64
        good[:5] + b'\x02' + good[6:],          # big-endian
        good[:40],
        programs.write_elf32(img, e_machine=programs.EM_X86_64),
        programs.write_elf32(img, e_type=programs.ET_REL),
        ]
    for data in bad:
        with pytest.raises(FormatError):
            load_elf32(data)

    with pytest.raises(UnsupportedFeature):
        load_elf32(programs.write_elf32(img, relocations=True))


if __name__ == '__main__':
    test_assemble_directives()
    test_assemble_errors()
    test_image_text_round_trip()
    test_image_problems()
    test_elf_round_trip()
    test_elf_jumptables_and_handler()
    test_elf_segments_only()
    test_elf_rejects()

    print('All tests passed successfully!')
