"""Two pass assembler for the image text format.

Source is line oriented. ``#`` starts a comment. Lines hold labels (``name:``), directives and
instructions::

    .section <name> kind=<kind> trust=<trusted|untrusted> base=<hex|auto>
    .sym <name> <hex-offset|.> <function|object|jumptable>
    .jumptable <hex-base|label> <entry-count>
    .entry <symbol|hex>
    .handler <symbol|hex>
    .word <hex|expr>
    .byte <hex|expr>
    .space <bytes>
    .align <bytes>
    <mnemonic operands...>

A ``.section`` line naming an existing section re-enters it. ``base=auto`` places the section in
the memory map region of its kind, after any earlier auto sections of that kind.

Expressions are sums of numbers and names (``label+8``, ``table-4``) optionally wrapped in
``%hi(...)``/``%lo(...)``; ``.`` is the current location. Names resolve to labels first and
``.sym`` symbols second. A numeric branch or jump operand is a pc-relative offset.
"""
import re
import struct

from . import isa
from .layout import SectionKind
from .image import ParseError, RangeError, UnknownSymbol, Trust, SymbolKind, ImageSection, Symbol, JumpTable, \
    Image, default_trust


__all__ = ['assemble', 'parse_image', 'hi20', 'lo12', 'PSEUDO_SIZES']


_LABEL_RE = re.compile(r'^\s*([A-Za-z_.$][\w.$]*)\s*:')
_TERM_RE = re.compile(r'\s*([+-])?\s*([A-Za-z_.$][\w.$]*|0[xX][0-9a-fA-F]+|\d+)\s*')
_MEM_RE = re.compile(r'^(.*)\(\s*([\w$.]+)\s*\)$')
_FUNC_RE = re.compile(r'^%(hi|lo)\((.*)\)$')

# Instruction count of each pseudo instruction whose size does not depend on its operands
PSEUDO_SIZES = {
    'nop': 1, 'ret': 1, 'mv': 1, 'not': 1, 'neg': 1, 'seqz': 1, 'snez': 1, 'j': 1, 'jr': 1, 'call': 1,
    'tail': 2, 'la': 2, 'beqz': 1, 'bnez': 1, 'bltz': 1, 'bgez': 1, 'blez': 1, 'bgtz': 1,
    'bgt': 1, 'ble': 1, 'bgtu': 1, 'bleu': 1,
    'csrr': 1, 'csrw': 1, 'csrs': 1, 'csrc': 1, 'csrwi': 1, 'csrsi': 1, 'csrci': 1,
    }

_FENCE_BITS = {'i': 8, 'o': 4, 'r': 2, 'w': 1}


def hi20(value):
    """Return the upper 20 bits that pair with lo12 to build `value`."""
    return ((value + 0x800) >> 12) & 0xFFFFF


def lo12(value):
    return isa.sext(value, 12)


def _is_literal(text):
    text = text.strip()
    pos = 0
    while pos < len(text):
        m = _TERM_RE.match(text, pos)
        if m is None or m.end() == pos:
            return False
        if not m.group(2)[0].isdigit():
            return False
        pos = m.end()
    return bool(text)


def _split_operands(text):
    text = text.strip()
    if not text:
        return []
    return [op.strip() for op in text.split(',')]


class _Section(object):
    def __init__(self, name, kind, trust, base, line):
        self.name = name
        self.kind = kind
        self.trust = trust
        self.base = base  # None means auto
        self.line = line
        self.items = []
        self.size = 0
        self.data = bytearray()


class _Item(object):
    def __init__(self, what, line, column, offset, size, mnemonic='', operands=(), text=''):
        self.what = what
        self.line = line
        self.column = column
        self.offset = offset
        self.size = size
        self.mnemonic = mnemonic
        self.operands = operands
        self.text = text


class _Assembler(object):
    def __init__(self, source, memory_map=None):
        self.source = source
        self.memory_map = memory_map
        self.sections = {}
        self.order = []
        self.current = None
        self.labels = {}  # name -> (section, offset)
        self.syms = []  # (name, section, offset, kind, line)
        self.jumptables = []  # (expr, count, line, column)
        self.entry = None  # (expr, line, column)
        self.handler = None

        self.addresses = {}
        self.sym_addresses = {}

    # ----- pass 1 -----
    def error(self, message, line, column=1, cls=ParseError, code=None):
        raise cls(message, line, column, code)

    def pass1(self):
        for lineno, raw in enumerate(self.source.splitlines(), 1):
            text = raw.split('#', 1)[0]
            column = 1
            while True:
                m = _LABEL_RE.match(text)
                if m is None:
                    break
                self.define_label(m.group(1), lineno, m.start(1) + 1)
                column += m.end()
                text = text[m.end():]
            stripped = text.strip()
            if not stripped:
                continue
            column += len(text) - len(text.lstrip())
            parts = stripped.split(None, 1)
            mnemonic = parts[0].lower()
            rest = parts[1] if len(parts) > 1 else ''
            if mnemonic.startswith('.'):
                self.directive(mnemonic, rest, lineno, column)
            else:
                self.instruction(mnemonic, rest, lineno, column)

    def require_section(self, line, column):
        if self.current is None:
            self.error('statement outside of a .section', line, column, code='NO-SECTION')
        return self.current

    def define_label(self, name, line, column):
        sec = self.require_section(line, column)
        if name in self.labels:
            self.error('duplicate label {!r}'.format(name), line, column, code='DUPLICATE')
        self.labels[name] = (sec, sec.size)

    def add_item(self, item):
        sec = self.current
        sec.items.append(item)
        sec.size += item.size

    def directive(self, name, rest, line, column):
        args = rest.split()
        if name == '.section':
            self.section(args, line, column)
        elif name == '.sym':
            sec = self.require_section(line, column)
            if len(args) != 3:
                self.error('expected .sym <name> <hex-offset|.> <kind>', line, column)
            sym_name, offset, kind = args
            try:
                kind = SymbolKind(kind.lower())
            except ValueError:
                self.error('unknown symbol kind {!r}'.format(kind), line, column)
            if offset == '.':
                offset = sec.size
            else:
                try:
                    offset = int(offset, 16)
                except ValueError:
                    self.error('invalid symbol offset {!r}'.format(offset), line, column)
            self.syms.append((sym_name, sec, offset, kind, line))
        elif name == '.jumptable':
            if len(args) != 2:
                self.error('expected .jumptable <base> <entry-count>', line, column)
            try:
                count = int(args[1], 0)
            except ValueError:
                self.error('invalid entry count {!r}'.format(args[1]), line, column)
            self.jumptables.append((args[0], count, line, column))
        elif name in ('.entry', '.handler'):
            if len(args) != 1:
                self.error('expected {} <symbol>'.format(name), line, column)
            setattr(self, name[1:], (args[0], line, column))
        elif name in ('.word', '.byte'):
            sec = self.require_section(line, column)
            size = 4 if name == '.word' else 1
            for value in _split_operands(rest):
                self.add_item(_Item(name[1:], line, column, sec.size, size, text=value))
        elif name in ('.space', '.align'):
            sec = self.require_section(line, column)
            try:
                amount = int(rest.strip(), 0)
            except ValueError:
                self.error('invalid size {!r}'.format(rest.strip()), line, column)
            if name == '.align':
                if amount <= 0 or amount & (amount - 1):
                    self.error('alignment must be a power of two', line, column)
                amount = (-sec.size) % amount
            elif amount < 0:
                self.error('negative .space', line, column)
            self.add_item(_Item('space', line, column, sec.size, amount))
        else:
            self.error('unknown directive {!r}'.format(name), line, column)

    def section(self, args, line, column):
        if not args:
            self.error('expected .section <name>', line, column)
        name = args[0]
        attrs = {}
        for arg in args[1:]:
            if '=' not in arg:
                self.error('expected key=value, got {!r}'.format(arg), line, column)
            key, value = arg.split('=', 1)
            attrs[key.lower()] = value
        unknown = set(attrs) - {'kind', 'trust', 'base'}
        if unknown:
            self.error('unknown section attribute {!r}'.format(sorted(unknown)[0]), line, column)

        kind = trust = base = None
        if 'kind' in attrs:
            try:
                kind = SectionKind(attrs['kind'].lower())
            except ValueError:
                self.error('unknown section kind {!r}'.format(attrs['kind']), line, column)
        if 'trust' in attrs:
            try:
                trust = Trust(attrs['trust'].lower())
            except ValueError:
                self.error('unknown trust {!r}'.format(attrs['trust']), line, column)
        if 'base' in attrs and attrs['base'].lower() != 'auto':
            try:
                base = int(attrs['base'], 16)
            except ValueError:
                self.error('invalid base {!r}'.format(attrs['base']), line, column)

        if name in self.sections:
            sec = self.sections[name]
            if (kind is not None and kind is not sec.kind) or (trust is not None and trust is not sec.trust) or \
                    (base is not None and base != sec.base):
                self.error('section {!r} re-entered with different attributes'.format(name), line, column)
        else:
            if kind is None:
                self.error('section {!r} needs kind='.format(name), line, column)
            sec = _Section(name, kind, trust or default_trust(kind), base, line)
            self.sections[name] = sec
            self.order.append(sec)
        self.current = sec

    def instruction(self, mnemonic, rest, line, column):
        sec = self.require_section(line, column)
        if sec.size % 4:
            self.error('instruction at unaligned offset 0x{:x}'.format(sec.size), line, column, code='ALIGN')
        operands = _split_operands(rest)
        if mnemonic == 'li':
            size = 2
            if len(operands) == 2 and _is_literal(operands[1]):
                value = self.literal(operands[1], line, column)
                if -2048 <= value < 2048 or lo12(value) == 0:
                    size = 1
        elif mnemonic in PSEUDO_SIZES:
            size = PSEUDO_SIZES[mnemonic]
        elif mnemonic in isa.INSTRUCTIONS:
            size = 1
        else:
            self.error('unknown mnemonic {!r}'.format(mnemonic), line, column, code='MNEMONIC')
        self.add_item(_Item('instr', line, column, sec.size, size * 4, mnemonic, operands))

    def literal(self, text, line, column):
        total = 0
        for sign, token in self.terms(text, line, column):
            total += sign * int(token, 0)
        return total

    def terms(self, text, line, column):
        text = text.strip()
        if not text:
            self.error('missing operand', line, column)
        terms = []
        pos = 0
        while pos < len(text):
            m = _TERM_RE.match(text, pos)
            if m is None or m.end() == pos:
                self.error('invalid expression {!r}'.format(text), line, column)
            terms.append((-1 if m.group(1) == '-' else 1, m.group(2)))
            pos = m.end()
        return terms

    # ----- layout -----
    def place(self):
        auto_next = {}
        for sec in self.order:
            if sec.base is None:
                if self.memory_map is None:
                    self.error('section {!r} uses base=auto without a memory map'.format(sec.name), sec.line,
                               code='NO-MAP')
                try:
                    start = self.memory_map.base(sec.kind)
                except KeyError:
                    self.error('memory map has no {} section'.format(sec.kind.value), sec.line, code='NO-MAP')
                sec.base = auto_next.get(sec.kind, start)
                auto_next[sec.kind] = sec.base + sec.size
            if sec.base % 4:
                self.error('section {!r} base 0x{:x} is not word aligned'.format(sec.name, sec.base), sec.line,
                           code='ALIGN')

        ordered = sorted(self.order, key=lambda s: (s.base, s.line))
        for prev, sec in zip(ordered, ordered[1:]):
            if sec.base < prev.base + prev.size:
                self.error('section {!r} overlaps {!r}'.format(sec.name, prev.name), sec.line, code='OVERLAP')

        self.addresses = {name: sec.base + offset for name, (sec, offset) in self.labels.items()}
        for name, sec, offset, kind, line in self.syms:
            if offset > sec.size:
                self.error('symbol {!r} offset 0x{:x} is outside section {!r}'.format(name, offset, sec.name), line)
            self.sym_addresses.setdefault(name, sec.base + offset)

    # ----- pass 2 -----
    def resolve(self, name, pc, line, column):
        if name == '.':
            return pc
        if name in self.addresses:
            return self.addresses[name]
        if name in self.sym_addresses:
            return self.sym_addresses[name]
        raise UnknownSymbol('unknown symbol {!r}'.format(name), line, column)

    def value(self, text, pc, line, column):
        text = text.strip()
        m = _FUNC_RE.match(text)
        if m:
            inner = self.value(m.group(2), pc, line, column)
            return hi20(inner) if m.group(1) == 'hi' else lo12(inner)
        total = 0
        for sign, token in self.terms(text, line, column):
            if token[0].isdigit():
                total += sign * int(token, 0)
            else:
                total += sign * self.resolve(token, pc, line, column)
        return total

    def target_offset(self, text, pc, line, column):
        if _is_literal(text):
            return self.literal(text, line, column)
        return self.value(text, pc, line, column) - pc

    def reg(self, text, line, column):
        try:
            return isa.reg_index(text)
        except isa.UnencodableField:
            self.error('unknown register {!r}'.format(text), line, column)

    def csr(self, text, line, column):
        try:
            return isa.csr_index(text)
        except isa.UnencodableField:
            self.error('unknown CSR {!r}'.format(text), line, column)

    def mem(self, text, pc, line, column):
        m = _MEM_RE.match(text.strip())
        if m is None:
            self.error('expected imm(reg), got {!r}'.format(text), line, column)
        imm = m.group(1).strip()
        return (self.value(imm, pc, line, column) if imm else 0), self.reg(m.group(2), line, column)

    def expand(self, item, pc):
        """Return the list of Instr for one source statement."""
        name, ops, line, col = item.mnemonic, item.operands, item.line, item.column
        reg = lambda t: self.reg(t, line, col)
        val = lambda t: self.value(t, pc, line, col)
        off = lambda t, at=pc: self.target_offset(t, at, line, col)

        def need(count):
            if len(ops) != count:
                self.error('{} expects {} operand(s), got {}'.format(name, count, len(ops)), line, col)

        if name in isa.INSTRUCTIONS:
            spec = isa.INSTRUCTIONS[name]
            fmt = spec.fmt.value
            cls = spec.cls
            if fmt == 'R':
                need(3)
                return [isa.Instr(name, reg(ops[0]), reg(ops[1]), reg(ops[2]))]
            elif fmt == 'SHIFT':
                need(3)
                return [isa.Instr(name, reg(ops[0]), reg(ops[1]), imm=val(ops[2]))]
            elif fmt == 'I' and cls is isa.OpClass.JALR:
                if len(ops) == 1:
                    return [isa.Instr(name, isa.RA, reg(ops[0]))]
                if len(ops) == 2 and '(' in ops[1]:
                    imm, rs1 = self.mem(ops[1], pc, line, col)
                    return [isa.Instr(name, reg(ops[0]), rs1, imm=imm)]
                if len(ops) == 2:
                    return [isa.Instr(name, reg(ops[0]), reg(ops[1]))]
                need(3)
                return [isa.Instr(name, reg(ops[0]), reg(ops[1]), imm=val(ops[2]))]
            elif fmt == 'I' and cls is isa.OpClass.LOAD:
                need(2)
                imm, rs1 = self.mem(ops[1], pc, line, col)
                return [isa.Instr(name, reg(ops[0]), rs1, imm=imm)]
            elif fmt == 'I':
                need(3)
                return [isa.Instr(name, reg(ops[0]), reg(ops[1]), imm=val(ops[2]))]
            elif fmt == 'S':
                need(2)
                imm, rs1 = self.mem(ops[1], pc, line, col)
                return [isa.Instr(name, rs1=rs1, rs2=reg(ops[0]), imm=imm)]
            elif fmt == 'B':
                need(3)
                return [isa.Instr(name, rs1=reg(ops[0]), rs2=reg(ops[1]), imm=off(ops[2]))]
            elif fmt == 'U':
                need(2)
                upper = val(ops[1])
                if not (-0x80000 <= upper <= 0xFFFFF):
                    self.error('{} immediate 0x{:x} does not fit 20 bits'.format(name, upper), line, col, RangeError)
                return [isa.Instr(name, reg(ops[0]), imm=isa.sext((upper & 0xFFFFF) << 12, 32))]
            elif fmt == 'J':
                if len(ops) == 1:
                    return [isa.Instr(name, isa.RA, imm=off(ops[0]))]
                need(2)
                return [isa.Instr(name, reg(ops[0]), imm=off(ops[1]))]
            elif fmt == 'CSR':
                need(3)
                return [isa.Instr(name, reg(ops[0]), rs1=reg(ops[2]), csr=self.csr(ops[1], line, col))]
            elif fmt == 'CSRI':
                need(3)
                return [isa.Instr(name, reg(ops[0]), imm=val(ops[2]), csr=self.csr(ops[1], line, col))]
            elif fmt == 'FENCE':
                if not ops:
                    return [isa.Instr(name, imm=0xFF)]
                if len(ops) == 1:
                    return [isa.Instr(name, imm=val(ops[0]))]
                need(2)
                bits = []
                for op in ops:
                    if not op or any(c not in _FENCE_BITS for c in op.lower()):
                        self.error('invalid fence set {!r}'.format(op), line, col)
                    bits.append(sum(_FENCE_BITS[c] for c in set(op.lower())))
                return [isa.Instr(name, imm=(bits[0] << 4) | bits[1])]
            need(0)
            return [isa.Instr(name)]

        if name == 'nop':
            need(0)
            return [isa.Instr('addi')]
        elif name == 'ret':
            need(0)
            return [isa.Instr('jalr', 0, isa.RA)]
        elif name == 'mv':
            need(2)
            return [isa.Instr('addi', reg(ops[0]), reg(ops[1]))]
        elif name == 'not':
            need(2)
            return [isa.Instr('xori', reg(ops[0]), reg(ops[1]), imm=-1)]
        elif name == 'neg':
            need(2)
            return [isa.Instr('sub', reg(ops[0]), 0, reg(ops[1]))]
        elif name == 'seqz':
            need(2)
            return [isa.Instr('sltiu', reg(ops[0]), reg(ops[1]), imm=1)]
        elif name == 'snez':
            need(2)
            return [isa.Instr('sltu', reg(ops[0]), 0, reg(ops[1]))]
        elif name == 'li':
            need(2)
            rd = reg(ops[0])
            value = isa.sext(val(ops[1]), 32)
            if item.size == 4:
                if -2048 <= value < 2048:
                    return [isa.Instr('addi', rd, 0, imm=value)]
                return [isa.Instr('lui', rd, imm=isa.sext(hi20(value) << 12, 32))]
            return [isa.Instr('lui', rd, imm=isa.sext(hi20(value) << 12, 32)),
                    isa.Instr('addi', rd, rd, imm=lo12(value))]
        elif name in ('la', 'tail'):
            need(2 if name == 'la' else 1)
            rd = reg(ops[0]) if name == 'la' else 6
            delta = isa.sext(val(ops[-1]) - pc, 32)
            auipc = isa.Instr('auipc', rd, imm=isa.sext(hi20(delta) << 12, 32))
            if name == 'la':
                return [auipc, isa.Instr('addi', rd, rd, imm=lo12(delta))]
            return [auipc, isa.Instr('jalr', 0, rd, imm=lo12(delta))]
        elif name == 'j':
            need(1)
            return [isa.Instr('jal', 0, imm=off(ops[0]))]
        elif name == 'call':
            need(1)
            return [isa.Instr('jal', isa.RA, imm=off(ops[0]))]
        elif name == 'jr':
            need(1)
            return [isa.Instr('jalr', 0, reg(ops[0]))]
        elif name in ('beqz', 'bnez', 'bltz', 'bgez'):
            need(2)
            op = {'beqz': 'beq', 'bnez': 'bne', 'bltz': 'blt', 'bgez': 'bge'}[name]
            return [isa.Instr(op, rs1=reg(ops[0]), imm=off(ops[1]))]
        elif name in ('blez', 'bgtz'):
            need(2)
            op = 'bge' if name == 'blez' else 'blt'
            return [isa.Instr(op, rs2=reg(ops[0]), imm=off(ops[1]))]
        elif name in ('bgt', 'ble', 'bgtu', 'bleu'):
            need(3)
            op = {'bgt': 'blt', 'ble': 'bge', 'bgtu': 'bltu', 'bleu': 'bgeu'}[name]
            return [isa.Instr(op, rs1=reg(ops[1]), rs2=reg(ops[0]), imm=off(ops[2]))]
        elif name == 'csrr':
            need(2)
            return [isa.Instr('csrrs', reg(ops[0]), csr=self.csr(ops[1], line, col))]
        elif name in ('csrw', 'csrs', 'csrc'):
            need(2)
            op = {'csrw': 'csrrw', 'csrs': 'csrrs', 'csrc': 'csrrc'}[name]
            return [isa.Instr(op, 0, reg(ops[1]), csr=self.csr(ops[0], line, col))]
        elif name in ('csrwi', 'csrsi', 'csrci'):
            need(2)
            return [isa.Instr('csrr' + name[3:], 0, imm=val(ops[1]), csr=self.csr(ops[0], line, col))]
        self.error('unknown mnemonic {!r}'.format(name), line, col, code='MNEMONIC')

    def pass2(self):
        for sec in self.order:
            data = bytearray()
            for item in sec.items:
                pc = sec.base + item.offset
                if item.what == 'space':
                    data.extend(bytes(item.size))
                elif item.what in ('word', 'byte'):
                    value = self.value(item.text, pc, item.line, item.column)
                    bits = 32 if item.what == 'word' else 8
                    if not (-(1 << (bits - 1)) <= value < (1 << bits)):
                        self.error('{} value {} out of range'.format(item.what, value), item.line, item.column,
                                   RangeError)
                    data.extend(struct.pack('<I' if bits == 32 else '<B', value & ((1 << bits) - 1)))
                else:
                    instrs = self.expand(item, pc)
                    if len(instrs) * 4 != item.size:
                        self.error('internal size mismatch for {}'.format(item.mnemonic), item.line, item.column)
                    for i, instr in enumerate(instrs):
                        try:
                            word = isa.encode(instr)
                        except isa.UnencodableField as err:
                            raise RangeError(str(err), item.line, item.column) from err
                        data.extend(struct.pack('<I', word))
            sec.data = data

    def point(self, spec):
        if spec is None:
            return None
        text, line, column = spec
        if text.lower().startswith('0x'):
            return self.literal(text, line, column)
        return self.value(text, 0, line, column)

    def build(self):
        self.pass1()
        self.place()
        self.pass2()

        sections = [ImageSection(sec.name, sec.kind, sec.trust, sec.base, bytes(sec.data)) for sec in self.order]
        symbols = []
        seen = set()
        for name, sec, offset, kind, line in self.syms:
            if name in seen:
                self.error('duplicate symbol {!r}'.format(name), line, code='DUPLICATE')
            seen.add(name)
            symbols.append(Symbol(sec.base + offset, name, kind))
        jumptables = []
        for text, count, line, column in self.jumptables:
            if text.lower().startswith('0x') or text.isdigit():
                base = int(text, 16)
            else:
                base = self.value(text, 0, line, column)
            jumptables.append(JumpTable(base, count))

        entry = self.point(self.entry)
        img = Image(sections, symbols, jumptables, entry=entry if entry is not None else 0,
                    handler=self.point(self.handler))
        for code, message in img.problems(check_entry=False):
            self.error(message, 0, 0, code=code)
        return img


def assemble(source, memory_map=None):
    """Assemble source text into an Image.

    Args:
        source (str): Program text (see module docs).
        memory_map (MemoryMap)[None]: Map used to place ``base=auto`` sections.

    Returns:
        img (Image): Assembled image.

    Raises:
        ParseError: Syntax errors, overlapping sections (code OVERLAP), duplicate labels.
        RangeError: Branch, jump or immediate out of range.
        UnknownSymbol: Reference to an undefined label or symbol.
    """
    return _Assembler(source, memory_map).build()


def parse_image(text):
    """Parse the image text format. Sections must carry explicit bases."""
    return _Assembler(text).build()
