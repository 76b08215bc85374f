"""Program builders shared by the tests.

Random clean programs come from call DAGs of FunctionSkeleton objects whose bodies only use
arithmetic, their own frame, a global buffer, forward branches and direct calls. Bodies never
write t4, t5 or t6 so the rule mutants below can use those registers as opaque values.
"""
import os
import sys
import random
import struct

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from detrap import isa
from detrap.layout import SectionKind, SectionSpec, DEFAULT_SIZES, SECTION_ORDER, plan_layout, \
    derive_trigger_policy
from detrap.image import SymbolKind
from detrap.assembler import assemble
from detrap.instrument import FunctionSkeleton, build_program
from detrap.machine import load


def default_map():
    return plan_layout([SectionSpec(kind, DEFAULT_SIZES[kind]) for kind in SECTION_ORDER])


def custom_map(**sizes):
    """Return a map with some section sizes replaced, e.g. ``custom_map(shadow_stack=0x10)``."""
    specs = []
    for kind in SECTION_ORDER:
        specs.append(SectionSpec(kind, sizes.get(kind.name.lower(), DEFAULT_SIZES[kind])))
    return plan_layout(specs)


def boot(source, memory_map=None, policy=None, **kwargs):
    """Assemble a program (or take an Image) and load it into a fresh machine."""
    memory_map = memory_map or default_map()
    img = assemble(source, memory_map) if isinstance(source, str) else source
    if policy is None:
        policy = derive_trigger_policy(memory_map)
    return load(img, memory_map, policy, **kwargs)


def run_program(source, memory_map=None, policy=None, max_steps=200000, **kwargs):
    return boot(source, memory_map, policy, **kwargs).run(max_steps)


def trusted_snippet(lines):
    """Return a program running `lines` in trusted code and exiting with a0."""
    return '\n'.join([
        '.section .trusted.text kind=trusted-code base=auto',
        '.sym _start . function',
        '_start:',
        ] + list(lines) + [
        '    li a7, 93',
        '    ecall',
        '.entry _start',
        ]) + '\n'


def untrusted_program(main_lines, data=None, handler=None, extra=()):
    """Return a program whose trusted ``_start`` calls the untrusted ``main`` and exits with its a0.

    Args:
        main_lines (list): Lines of ``main`` including its return.
        data (dict)[None]: Untrusted data words, label -> list of word expressions.
        handler (list)[None]: Lines of an untrusted trap handler ``handler``.
        extra (list)[()]: More untrusted code lines placed after ``main``.
    """
    lines = [
        '.section .trusted.text kind=trusted-code base=auto',
        '.sym _start . function',
        '_start:',
        '    csrrsi x0, mstatus, 8',
        '    call main',
        '.sym __detrap_exit . function',
        '__detrap_exit:',
        '    li a7, 93',
        '    ecall',
        '    j __detrap_exit',
        '.sym __detrap_trap_return . function',
        '__detrap_trap_return:',
        '    li a7, 0x103',
        '    ecall',
        '    j __detrap_trap_return',
        '.section .text kind=untrusted-code base=auto',
        '.sym main . function',
        'main:',
        ]
    lines += list(main_lines)
    lines += list(extra)
    if handler is not None:
        lines += ['.sym handler . function', 'handler:'] + list(handler)
    if data:
        lines.append('.section .data kind=untrusted-data base=auto')
        for label, words in sorted(data.items()):
            lines += ['.sym {} . object'.format(label), '{}:'.format(label)]
            lines += ['    .word {}'.format(word) for word in words]
    lines.append('.entry _start')
    if handler is not None:
        lines.append('.handler handler')
    return '\n'.join(lines) + '\n'


# ----- random instructions -----
def random_instr(rng):
    """Return a random encodable instruction."""
    name = rng.choice(sorted(isa.INSTRUCTIONS))
    fmt = isa.INSTRUCTIONS[name].fmt.value
    r = lambda: rng.randrange(32)
    if fmt == 'R':
        return isa.Instr(name, r(), r(), r())
    elif fmt == 'SHIFT':
        return isa.Instr(name, r(), r(), imm=rng.randrange(32))
    elif fmt == 'I':
        return isa.Instr(name, r(), r(), imm=rng.randint(-2048, 2047))
    elif fmt == 'S':
        return isa.Instr(name, rs1=r(), rs2=r(), imm=rng.randint(-2048, 2047))
    elif fmt == 'B':
        return isa.Instr(name, rs1=r(), rs2=r(), imm=rng.randint(-2048, 2047) * 2)
    elif fmt == 'U':
        return isa.Instr(name, r(), imm=isa.sext(rng.randrange(1 << 20) << 12, 32))
    elif fmt == 'J':
        return isa.Instr(name, r(), imm=rng.randint(-(1 << 19), (1 << 19) - 1) * 2)
    elif fmt == 'CSR':
        return isa.Instr(name, r(), r(), csr=rng.randrange(4096))
    elif fmt == 'CSRI':
        return isa.Instr(name, r(), imm=rng.randrange(32), csr=rng.randrange(4096))
    elif fmt == 'FENCE':
        return isa.Instr(name, imm=rng.randrange(256))
    return isa.Instr(name)


# ----- random clean programs -----
BODY_REGS = ('a0', 'a1', 'a2', 'a3', 'a4', 'a5', 't0', 't1', 't2', 't3', 's0', 's1', 's3', 's4')
GLOBAL_WORDS = 8


def _random_op(rng, frame):
    pick = rng.choice
    d, s, t = pick(BODY_REGS), pick(BODY_REGS), pick(BODY_REGS)
    kind = rng.randrange(7 if frame > 4 else 5)
    if kind == 0:
        return ['    addi {}, {}, {}'.format(d, s, rng.randint(-100, 100))]
    elif kind == 1:
        op = pick(('add', 'sub', 'xor', 'or', 'and', 'mul', 'mulh', 'mulhu', 'div', 'divu', 'rem', 'remu',
                   'sll', 'srl', 'sra', 'slt', 'sltu'))
        return ['    {} {}, {}, {}'.format(op, d, s, t)]
    elif kind == 2:
        return ['    {} {}, {}, {}'.format(pick(('slli', 'srli', 'srai')), d, s, rng.randrange(32))]
    elif kind == 3:
        return ['    li {}, {}'.format(d, rng.randrange(-(1 << 31), 1 << 31))]
    elif kind == 4:
        k = 4 * rng.randrange(GLOBAL_WORDS)
        if rng.random() < 0.5:
            return ['    la t0, gbuf', '    sw {}, {}(t0)'.format(s, k)]
        return ['    la t1, gbuf', '    lw {}, {}(t1)'.format(d, k)]
    off = 4 * rng.randrange((frame - 4) // 4)
    if kind == 5:
        return ['    sw {}, {}(sp)'.format(s, off)]
    return ['    lw {}, {}(sp)'.format(d, off)]


def random_skeletons(rng, count=None):
    """Return the functions of a random call DAG; ``main`` is first and always calls, the last is a leaf."""
    count = count or rng.randint(2, 6)
    names = ['main'] + ['f{}'.format(i) for i in range(1, count)]
    functions = []
    for i, name in enumerate(names):
        later = names[i + 1:]
        callees = []
        if later:
            callees = rng.sample(later, rng.randint(1 if i == 0 else 0, min(2, len(later))))
        putchar = bool(later) and rng.random() < 0.3
        leaf = not callees and not putchar
        frame = rng.choice((16, 32, 48)) if not leaf or rng.random() < 0.5 else 0

        events = [['    call {}'.format(callee)] for callee in callees]
        if putchar:
            events.append(['    li a0, {}'.format(rng.randint(65, 90)), '    call __detrap_putchar'])
        events += [_random_op(rng, frame) for _ in range(rng.randint(3, 12))]
        rng.shuffle(events)

        body = ['    sw zero, {}(sp)'.format(off) for off in range(0, max(frame - 4, 0), 4)]
        for n, event in enumerate(events):
            if rng.random() < 0.25:
                label = '.L{}_{}'.format(name, n)
                body.append('    {} {}, {}'.format(rng.choice(('beqz', 'bnez', 'bltz', 'bgez')),
                                                   rng.choice(BODY_REGS), label))
                body += event
                body.append('{}:'.format(label))
            else:
                body += event
        functions.append(FunctionSkeleton(name, leaf, frame, body))
    return functions


def random_program(seed, instrument=True):
    """Return (source, functions) of a random clean program."""
    rng = random.Random(seed)
    functions = random_skeletons(rng)
    source = build_program(functions, instrument=instrument, data={'gbuf': ['0'] * GLOBAL_WORDS})
    return source, functions


# ----- rule mutants -----
MUTATION_POINT = '    # mutation point'

LEAF_RA_MUTATIONS = (
    ['    mv ra, t6'],
    ['    addi ra, ra, 4'],
    ['    lw ra, 0(sp)'],
    ['    auipc ra, 0'],
    ['    lui ra, 0x1f'],
    )

MUTATIONS = {
    'R2': (
        ['    addi x18, x18, 4'],
        ['    mv x18, t6'],
        ['    lw x18, 0(sp)'],
        ['    addi x18, x18, -4'],
        ['    add x18, x18, t6'],
        ['    csrrs x18, mscratch, x0'],
        ),
    'R3': (
        ['    csrrw x0, tdata1, t6'],
        ['    csrw tselect, t6'],
        ['    csrw tdata2, t6'],
        ['    csrw tdata3, t6'],
        ['    csrw mtvec, t6'],
        ['    csrw mepc, t6'],
        ['    csrw mcause, t6'],
        ['    csrrsi x0, mstatus, 8'],
        ['    csrrci x0, mstatus, 8'],
        ['    csrrs t6, tdata1, t5'],
        ),
    'R4': (
        ['    mret'],
        ['    addi t6, t6, 1', '    mret'],
        ),
    'R5': (
        ['    jr t6'],
        ['    jalr t6'],
        ['    jalr x0, 8(t6)'],
        ['    jalr t5, 0(t6)'],
        ),
    'R6': (
        ['    beq t6, t5, 2'],
        ['    bne t6, x0, 6'],
        ['    blt t6, t5, -2'],
        ['    jal x0, 10'],
        ['    jal ra, 6'],
        ['    jal x0, 0x80000'],
        ),
    'R7': (
        ['    lw t5, {off}(sp)', '    li t4, 4', '    bgeu t5, t4, .Lmut{uid}', '    slli t4, t5, 2',
         '    la t6, main', '    add t4, t4, t6', '    lw t4, 0(t4)', '    jr t4', '.Lmut{uid}:'],
        ['    lw t4, {off}(sp)', '    bgeu t6, t4, .Lmut{uid}', '    slli t5, t6, 2', '    la t4, main',
         '    add t5, t5, t4', '    lw t5, 0(t5)', '    jr t5', '.Lmut{uid}:'],
        ),
    }


def _insert_marker(function, rng):
    function.body.insert(rng.randint(0, len(function.body)), MUTATION_POINT)


def _apply(source, lines):
    return source.replace(MUTATION_POINT, '\n'.join(lines), 1)


def make_mutant(seed, rule, variant):
    """Return the source of a random clean program carrying one violation of `rule`."""
    rng = random.Random(seed)
    functions = random_skeletons(rng)
    main, leaf = functions[0], functions[-1]

    if rule == 'R1':
        if variant < len(LEAF_RA_MUTATIONS):
            _insert_marker(leaf, rng)
            source = build_program(functions, data={'gbuf': ['0'] * GLOBAL_WORDS})
            return _apply(source, LEAF_RA_MUTATIONS[variant])
        _insert_marker(main, rng)
        source = build_program(functions, data={'gbuf': ['0'] * GLOBAL_WORDS})
        if variant == len(LEAF_RA_MUTATIONS):
            return _apply(source, ['    call {}'.format(leaf.name), '    ret'])
        head, tail = source.split(MUTATION_POINT, 1)
        if variant == len(LEAF_RA_MUTATIONS) + 1:
            # reload ra from the normal stack instead of the shadow stack
            tail = tail.replace('    lw ra, 0(x18)', '    lw ra, {}(sp)'.format(main.frame_size - 4), 1)
        else:
            # jump over the decrement straight to the reload
            epilogue = '    addi x18, x18, -4\n    lw ra, 0(x18)'
            tail = tail.replace(epilogue, '    j .Lreload{0}\n    addi x18, x18, -4\n.Lreload{0}:\n'
                                          '    lw ra, 0(x18)'.format(seed), 1)
        return head + tail

    _insert_marker(main, rng)
    source = build_program(functions, data={'gbuf': ['0'] * GLOBAL_WORDS})
    lines = [line.format(off=4 * rng.randrange(3), uid=seed) for line in MUTATIONS[rule][variant]]
    return _apply(source, lines)


def mutants(seeds=(0, 1)):
    """Yield (rule, variant, source) for every mutation kind and seed."""
    for seed in seeds:
        for variant in range(len(LEAF_RA_MUTATIONS) + 3):
            yield 'R1', variant, make_mutant(seed, 'R1', variant)
        for rule, variants in sorted(MUTATIONS.items()):
            for variant in range(len(variants)):
                yield rule, variant, make_mutant(seed, rule, variant)


# ----- ELF32 -----
SHF_WRITE = 0x1
SHF_ALLOC = 0x2
SHF_EXECINSTR = 0x4
ET_REL = 1
ET_EXEC = 2
EM_RISCV = 243
EM_X86_64 = 62


def _section_flags(sec):
    if sec.kind.is_code:
        return SHF_ALLOC | SHF_EXECINSTR
    elif sec.kind in (SectionKind.RODATA, SectionKind.MMIO):
        return SHF_ALLOC
    return SHF_ALLOC | SHF_WRITE


def _pad(buf):
    while len(buf) % 4:
        buf.append(0)


def write_elf32(img, e_type=ET_EXEC, e_machine=EM_RISCV, with_sections=True, relocations=False):
    """Return a little-endian ELF32 executable holding the image sections and symbols.

    Jumptable symbols get ``st_size`` from the image jumptables.
    """
    shstrtab = bytearray(b'\0')
    strtab = bytearray(b'\0')

    def add_name(table, name):
        offset = len(table)
        table.extend(name.encode() + b'\0')
        return offset

    header_size = 52 + 32 * len(img.sections)
    body = bytearray()
    phdrs = []
    shdrs = [struct.pack('<10I', *([0] * 10))]
    section_index = {}
    for sec in img.sections:
        offset = header_size + len(body)
        body.extend(sec.data)
        _pad(body)
        flags = _section_flags(sec)
        p_flags = 0x4 | (0x1 if flags & SHF_EXECINSTR else 0) | (0x2 if flags & SHF_WRITE else 0)
        phdrs.append(struct.pack('<8I', 1, offset, sec.base, sec.base, len(sec.data), len(sec.data), p_flags, 4))
        section_index[sec.name] = len(shdrs)
        shdrs.append(struct.pack('<10I', add_name(shstrtab, sec.name), 1, flags, sec.base, offset,
                                 len(sec.data), 0, 0, 4, 0))

    symbols = bytearray(16)
    for sym in img.symbols:
        sym_type = 2 if sym.kind is SymbolKind.FUNCTION else 1
        size = 0
        if sym.kind is SymbolKind.JUMPTABLE:
            jt = img.jumptable_at(sym.address)
            size = jt.count * 4 if jt is not None else 0
        sec = img.section_at(sym.address)
        shndx = section_index[sec.name] if sec is not None else 0xFFF1
        symbols.extend(struct.pack('<IIIBBH', add_name(strtab, sym.name), sym.address, size,
                                   (1 << 4) | sym_type, 0, shndx))

    symtab_index = len(shdrs)
    offset = header_size + len(body)
    body.extend(symbols)
    shdrs.append(struct.pack('<10I', add_name(shstrtab, '.symtab'), 2, 0, 0, offset, len(symbols),
                             symtab_index + 1, 1, 4, 16))
    offset = header_size + len(body)
    body.extend(strtab)
    _pad(body)
    shdrs.append(struct.pack('<10I', add_name(shstrtab, '.strtab'), 3, 0, 0, offset, len(strtab), 0, 0, 1, 0))
    if relocations:
        shdrs.append(struct.pack('<10I', add_name(shstrtab, '.rela.text'), 4, 0, 0, header_size + len(body), 0,
                                 symtab_index, 1, 4, 12))
    shstrtab_index = len(shdrs)
    name = add_name(shstrtab, '.shstrtab')
    offset = header_size + len(body)
    body.extend(shstrtab)
    _pad(body)
    shdrs.append(struct.pack('<10I', name, 3, 0, 0, offset, len(shstrtab), 0, 0, 1, 0))

    shoff = header_size + len(body)
    ident = b'\x7fELF' + bytes([1, 1, 1, 0]) + bytes(8)
    header = ident + struct.pack('<HHIIIIIHHHHHH', e_type, e_machine, 1, img.entry, 52,
                                 shoff if with_sections else 0, 0, 52, 32, len(phdrs), 40,
                                 len(shdrs) if with_sections else 0, shstrtab_index if with_sections else 0)
    data = header + b''.join(phdrs) + bytes(body)
    if with_sections:
        data += b''.join(shdrs)
    return data
