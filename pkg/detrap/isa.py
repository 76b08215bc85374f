"""RV32IM + Zicsr instruction decoding, encoding, and classification.

All supported instructions are 32 bits wide. Compressed encodings (lowest two bits not
``11``) are rejected as illegal.
"""
import enum
from dataclasses import dataclass


__all__ = [
    'IsaError', 'IllegalInstruction', 'UnencodableField',
    'OpClass', 'Instr', 'ClassTags', 'INSTRUCTIONS', 'CSRS', 'CSR_NAMES', 'REG_NAMES',
    'RA', 'SP', 'SSP', 'ZERO',
    'make', 'decode', 'encode', 'classify', 'writes_register', 'reads_registers', 'disassemble',
    'reg_index', 'csr_index', 'sext', 'MRET_WORD', 'ECALL_WORD', 'EBREAK_WORD', 'NOP_WORD',
    ]


class IsaError(Exception):
    pass


class IllegalInstruction(IsaError):
    def __init__(self, word, reason=''):
        self.word = word
        self.reason = reason
        super().__init__('illegal instruction 0x{:08x}{}'.format(word & 0xFFFFFFFF, ': ' + reason if reason else ''))


class UnencodableField(IsaError):
    pass


ZERO = 0
RA = 1
SP = 2
SSP = 18  # shadow stack pointer

REG_NAMES = ('zero', 'ra', 'sp', 'gp', 'tp', 't0', 't1', 't2', 's0', 's1', 'a0', 'a1', 'a2', 'a3', 'a4', 'a5',
             'a6', 'a7', 's2', 's3', 's4', 's5', 's6', 's7', 's8', 's9', 's10', 's11', 't3', 't4', 't5', 't6')
_REG_ALIASES = dict({name: i for i, name in enumerate(REG_NAMES)}, fp=8, ssp=SSP)
_REG_ALIASES.update({'x{}'.format(i): i for i in range(32)})

# Scanner and machine share this table.
CSRS = {
    'mstatus': 0x300,
    'mtvec': 0x305,
    'mscratch': 0x340,
    'mepc': 0x341,
    'mcause': 0x342,
    'mtval': 0x343,
    'tselect': 0x7A0,
    'tdata1': 0x7A1,
    'tdata2': 0x7A2,
    'tdata3': 0x7A3,
    'mcycle': 0xB00,
    'minstret': 0xB02,
    }
CSR_NAMES = {v: k for k, v in CSRS.items()}

MRET_WORD = 0x30200073
ECALL_WORD = 0x00000073
EBREAK_WORD = 0x00100073
NOP_WORD = 0x00000013


class OpClass(enum.Enum):
    LUI = 'LUI'
    AUIPC = 'AUIPC'
    JAL = 'JAL'
    JALR = 'JALR'
    BRANCH = 'BRANCH'
    LOAD = 'LOAD'
    STORE = 'STORE'
    OP_IMM = 'OP-IMM'
    OP = 'OP'
    SYSTEM = 'SYSTEM'
    CSR = 'CSR'
    MULDIV = 'MUL/DIV'
    FENCE = 'FENCE'


class _Fmt(enum.Enum):
    R = 'R'
    I = 'I'
    SHIFT = 'SHIFT'
    S = 'S'
    B = 'B'
    U = 'U'
    J = 'J'
    CSR = 'CSR'
    CSRI = 'CSRI'
    SYS = 'SYS'
    FENCE = 'FENCE'


@dataclass(frozen=True)
class _Spec:
    name: str
    cls: OpClass
    fmt: _Fmt
    opcode: int
    funct3: int = 0
    funct7: int = 0
    word: int = 0  # fixed encoding for SYSTEM instructions


def _table():
    specs = [
        _Spec('lui', OpClass.LUI, _Fmt.U, 0x37),
        _Spec('auipc', OpClass.AUIPC, _Fmt.U, 0x17),
        _Spec('jal', OpClass.JAL, _Fmt.J, 0x6F),
        _Spec('jalr', OpClass.JALR, _Fmt.I, 0x67, 0),
        _Spec('fence', OpClass.FENCE, _Fmt.FENCE, 0x0F, 0),
        _Spec('ecall', OpClass.SYSTEM, _Fmt.SYS, 0x73, word=ECALL_WORD),
        _Spec('ebreak', OpClass.SYSTEM, _Fmt.SYS, 0x73, word=EBREAK_WORD),
        _Spec('mret', OpClass.SYSTEM, _Fmt.SYS, 0x73, word=MRET_WORD),
        ]
    for f3, name in enumerate(('beq', 'bne', None, None, 'blt', 'bge', 'bltu', 'bgeu')):
        if name:
            specs.append(_Spec(name, OpClass.BRANCH, _Fmt.B, 0x63, f3))
    for f3, name in enumerate(('lb', 'lh', 'lw', None, 'lbu', 'lhu')):
        if name:
            specs.append(_Spec(name, OpClass.LOAD, _Fmt.I, 0x03, f3))
    for f3, name in enumerate(('sb', 'sh', 'sw')):
        specs.append(_Spec(name, OpClass.STORE, _Fmt.S, 0x23, f3))
    for f3, name in ((0, 'addi'), (2, 'slti'), (3, 'sltiu'), (4, 'xori'), (6, 'ori'), (7, 'andi')):
        specs.append(_Spec(name, OpClass.OP_IMM, _Fmt.I, 0x13, f3))
    for f3, f7, name in ((1, 0x00, 'slli'), (5, 0x00, 'srli'), (5, 0x20, 'srai')):
        specs.append(_Spec(name, OpClass.OP_IMM, _Fmt.SHIFT, 0x13, f3, f7))
    for f3, f7, name in ((0, 0x00, 'add'), (0, 0x20, 'sub'), (1, 0x00, 'sll'), (2, 0x00, 'slt'),
                         (3, 0x00, 'sltu'), (4, 0x00, 'xor'), (5, 0x00, 'srl'), (5, 0x20, 'sra'),
                         (6, 0x00, 'or'), (7, 0x00, 'and')):
        specs.append(_Spec(name, OpClass.OP, _Fmt.R, 0x33, f3, f7))
    for f3, name in enumerate(('mul', 'mulh', 'mulhsu', 'mulhu', 'div', 'divu', 'rem', 'remu')):
        specs.append(_Spec(name, OpClass.MULDIV, _Fmt.R, 0x33, f3, 0x01))
    for f3, name in ((1, 'csrrw'), (2, 'csrrs'), (3, 'csrrc')):
        specs.append(_Spec(name, OpClass.CSR, _Fmt.CSR, 0x73, f3))
    for f3, name in ((5, 'csrrwi'), (6, 'csrrsi'), (7, 'csrrci')):
        specs.append(_Spec(name, OpClass.CSR, _Fmt.CSRI, 0x73, f3))
    return {spec.name: spec for spec in specs}


INSTRUCTIONS = _table()

# Decode lookups
_BY_OPCODE_F3 = {}
_BY_OPCODE_F3_F7 = {}
for _spec in INSTRUCTIONS.values():
    if _spec.fmt in (_Fmt.R, _Fmt.SHIFT):
        _BY_OPCODE_F3_F7[(_spec.opcode, _spec.funct3, _spec.funct7)] = _spec
    elif _spec.fmt not in (_Fmt.SYS, _Fmt.U, _Fmt.J):
        _BY_OPCODE_F3[(_spec.opcode, _spec.funct3)] = _spec
_BY_WORD = {spec.word: spec for spec in INSTRUCTIONS.values() if spec.fmt is _Fmt.SYS}
_BY_OPCODE = {spec.opcode: spec for spec in INSTRUCTIONS.values() if spec.fmt in (_Fmt.U, _Fmt.J)}

# Immediate field ranges as (min, max, alignment)
_IMM_RANGE = {
    _Fmt.I: (-2048, 2047, 1),
    _Fmt.S: (-2048, 2047, 1),
    _Fmt.B: (-4096, 4094, 2),
    _Fmt.U: (-0x80000000, 0x7FFFF000, 4096),
    _Fmt.J: (-0x100000, 0xFFFFE, 2),
    _Fmt.SHIFT: (0, 31, 1),
    _Fmt.CSRI: (0, 31, 1),
    _Fmt.FENCE: (0, 0xFF, 1),
    }


def sext(value, bits):
    """Sign extend the lowest `bits` of value."""
    value &= (1 << bits) - 1
    if value & (1 << (bits - 1)):
        value -= 1 << bits
    return value


@dataclass(frozen=True)
class Instr:
    """Decoded instruction.

    ``imm`` holds the value the instruction adds or compares: the full shifted value for
    U-type, the byte offset for branches and jumps, the shift amount for shifts, and the
    5-bit zimm for CSR immediate forms. ``raw`` is informational and does not take part
    in equality.
    """
    name: str
    rd: int = 0
    rs1: int = 0
    rs2: int = 0
    imm: int = 0
    csr: int = 0
    raw: int = None

    def __eq__(self, other):
        if not isinstance(other, Instr):
            return NotImplemented
        return self.key() == other.key()

    def __hash__(self):
        return hash(self.key())

    def key(self):
        return (self.name, self.rd, self.rs1, self.rs2, self.imm, self.csr)

    @property
    def spec(self):
        return INSTRUCTIONS[self.name]

    @property
    def opclass(self):
        return INSTRUCTIONS[self.name].cls

    def __str__(self):
        return disassemble(self)


def make(name, rd=0, rs1=0, rs2=0, imm=0, csr=0):
    """Create an instruction by mnemonic, resolving register and CSR names."""
    if name not in INSTRUCTIONS:
        raise UnencodableField('unsupported instruction {!r}'.format(name))
    return Instr(name, reg_index(rd), reg_index(rs1), reg_index(rs2), imm, csr_index(csr))


def reg_index(reg):
    """Return the register number for an index or an ABI/xN name."""
    if isinstance(reg, int):
        return reg
    try:
        return _REG_ALIASES[reg.strip().lower()]
    except KeyError:
        raise UnencodableField('unknown register {!r}'.format(reg)) from None


def csr_index(csr):
    """Return the CSR number for an index or a CSR name."""
    if isinstance(csr, int):
        return csr
    text = csr.strip().lower()
    if text in CSRS:
        return CSRS[text]
    try:
        return int(text, 0)
    except ValueError:
        raise UnencodableField('unknown CSR {!r}'.format(csr)) from None


def _imm_i(word):
    return sext(word >> 20, 12)


def _imm_s(word):
    return sext(((word >> 25) << 5) | ((word >> 7) & 0x1F), 12)


def _imm_b(word):
    imm = (((word >> 31) & 1) << 12) | (((word >> 7) & 1) << 11) | (((word >> 25) & 0x3F) << 5) | \
          (((word >> 8) & 0xF) << 1)
    return sext(imm, 13)


def _imm_j(word):
    imm = (((word >> 31) & 1) << 20) | (((word >> 12) & 0xFF) << 12) | (((word >> 20) & 1) << 11) | \
          (((word >> 21) & 0x3FF) << 1)
    return sext(imm, 21)


def decode(word):
    """Decode a 32-bit instruction word.

    Args:
        word (int): Instruction word (little-endian value as read from memory).

    Returns:
        instr (Instr): Decoded instruction with ``raw`` set to the word.

    Raises:
        IllegalInstruction: Compressed, unsupported, or malformed encodings. Encodings with
            non-zero bits in fields the instruction does not use are malformed.
    """
    word &= 0xFFFFFFFF
    if word & 0x3 != 0x3:
        raise IllegalInstruction(word, 'compressed encoding')
    opcode = word & 0x7F
    rd = (word >> 7) & 0x1F
    funct3 = (word >> 12) & 0x7
    rs1 = (word >> 15) & 0x1F
    rs2 = (word >> 20) & 0x1F
    funct7 = word >> 25

    spec = _BY_OPCODE.get(opcode)
    if spec is not None:
        if spec.fmt is _Fmt.U:
            return Instr(spec.name, rd=rd, imm=sext(word & 0xFFFFF000, 32), raw=word)
        return Instr(spec.name, rd=rd, imm=_imm_j(word), raw=word)

    if opcode == 0x73 and funct3 == 0:
        spec = _BY_WORD.get(word)
        if spec is None:
            raise IllegalInstruction(word, 'unsupported system instruction')
        return Instr(spec.name, raw=word)

    spec = _BY_OPCODE_F3_F7.get((opcode, funct3, funct7))
    if spec is None and opcode == 0x13 and funct3 in (1, 5):
        spec = _BY_OPCODE_F3_F7.get((opcode, funct3, funct7 & 0x7E))  # bit 25 is shamt[5] on RV64
        if spec is not None:
            raise IllegalInstruction(word, 'shift amount out of range')
    if spec is not None:
        if spec.fmt is _Fmt.SHIFT:
            return Instr(spec.name, rd=rd, rs1=rs1, imm=rs2, raw=word)
        return Instr(spec.name, rd=rd, rs1=rs1, rs2=rs2, raw=word)

    spec = _BY_OPCODE_F3.get((opcode, funct3))
    if spec is None:
        raise IllegalInstruction(word, 'unsupported opcode')
    if spec.fmt is _Fmt.I:
        return Instr(spec.name, rd=rd, rs1=rs1, imm=_imm_i(word), raw=word)
    elif spec.fmt is _Fmt.S:
        return Instr(spec.name, rs1=rs1, rs2=rs2, imm=_imm_s(word), raw=word)
    elif spec.fmt is _Fmt.B:
        return Instr(spec.name, rs1=rs1, rs2=rs2, imm=_imm_b(word), raw=word)
    elif spec.fmt is _Fmt.CSR:
        return Instr(spec.name, rd=rd, rs1=rs1, csr=word >> 20, raw=word)
    elif spec.fmt is _Fmt.CSRI:
        return Instr(spec.name, rd=rd, imm=rs1, csr=word >> 20, raw=word)
    elif spec.fmt is _Fmt.FENCE:
        if rd or rs1 or (word >> 28):
            raise IllegalInstruction(word, 'unsupported fence variant')
        return Instr(spec.name, imm=(word >> 20) & 0xFF, raw=word)
    raise IllegalInstruction(word, 'unsupported opcode')


def _check_range(instr, fmt):
    low, high, align = _IMM_RANGE[fmt]
    if not (low <= instr.imm <= high) or instr.imm % align:
        raise UnencodableField('{} immediate {} out of range [{}, {}] (alignment {})'.format(
            instr.name, instr.imm, low, high, align))


def _check_unused(instr, *fields):
    for field in fields:
        if getattr(instr, field):
            raise UnencodableField('{} does not use the {} field'.format(instr.name, field))


def encode(instr):
    """Encode an instruction into its 32-bit word.

    Raises:
        UnencodableField: Unknown mnemonic, register out of range, immediate out of range for
            the format, or a non-zero value in a field the format does not use.
    """
    try:
        spec = INSTRUCTIONS[instr.name]
    except KeyError:
        raise UnencodableField('unsupported instruction {!r}'.format(instr.name)) from None
    for reg in (instr.rd, instr.rs1, instr.rs2):
        if not (0 <= reg < 32):
            raise UnencodableField('register index {} out of range'.format(reg))
    fmt = spec.fmt
    rd, rs1, rs2, op, f3 = instr.rd, instr.rs1, instr.rs2, spec.opcode, spec.funct3

    if fmt is _Fmt.R:
        _check_unused(instr, 'imm', 'csr')
        return (spec.funct7 << 25) | (rs2 << 20) | (rs1 << 15) | (f3 << 12) | (rd << 7) | op
    elif fmt is _Fmt.SHIFT:
        _check_unused(instr, 'rs2', 'csr')
        _check_range(instr, fmt)
        return (spec.funct7 << 25) | (instr.imm << 20) | (rs1 << 15) | (f3 << 12) | (rd << 7) | op
    elif fmt is _Fmt.I:
        _check_unused(instr, 'rs2', 'csr')
        _check_range(instr, fmt)
        return ((instr.imm & 0xFFF) << 20) | (rs1 << 15) | (f3 << 12) | (rd << 7) | op
    elif fmt is _Fmt.S:
        _check_unused(instr, 'rd', 'csr')
        _check_range(instr, fmt)
        imm = instr.imm & 0xFFF
        return ((imm >> 5) << 25) | (rs2 << 20) | (rs1 << 15) | (f3 << 12) | ((imm & 0x1F) << 7) | op
    elif fmt is _Fmt.B:
        _check_unused(instr, 'rd', 'csr')
        _check_range(instr, fmt)
        imm = instr.imm & 0x1FFF
        return (((imm >> 12) & 1) << 31) | (((imm >> 5) & 0x3F) << 25) | (rs2 << 20) | (rs1 << 15) | \
            (f3 << 12) | (((imm >> 1) & 0xF) << 8) | (((imm >> 11) & 1) << 7) | op
    elif fmt is _Fmt.U:
        _check_unused(instr, 'rs1', 'rs2', 'csr')
        _check_range(instr, fmt)
        return (instr.imm & 0xFFFFF000) | (rd << 7) | op
    elif fmt is _Fmt.J:
        _check_unused(instr, 'rs1', 'rs2', 'csr')
        _check_range(instr, fmt)
        imm = instr.imm & 0x1FFFFF
        return (((imm >> 20) & 1) << 31) | (((imm >> 1) & 0x3FF) << 21) | (((imm >> 11) & 1) << 20) | \
            (((imm >> 12) & 0xFF) << 12) | (rd << 7) | op
    elif fmt is _Fmt.CSR:
        _check_unused(instr, 'rs2', 'imm')
        if not (0 <= instr.csr < 0x1000):
            raise UnencodableField('CSR index {} out of range'.format(instr.csr))
        return (instr.csr << 20) | (rs1 << 15) | (f3 << 12) | (rd << 7) | op
    elif fmt is _Fmt.CSRI:
        _check_unused(instr, 'rs1', 'rs2')
        _check_range(instr, fmt)
        if not (0 <= instr.csr < 0x1000):
            raise UnencodableField('CSR index {} out of range'.format(instr.csr))
        return (instr.csr << 20) | (instr.imm << 15) | (f3 << 12) | (rd << 7) | op
    elif fmt is _Fmt.FENCE:
        _check_unused(instr, 'rd', 'rs1', 'rs2', 'csr')
        _check_range(instr, fmt)
        return (instr.imm << 20) | op
    _check_unused(instr, 'rd', 'rs1', 'rs2', 'imm', 'csr')
    return spec.word


@dataclass(frozen=True)
class ClassTags:
    is_call: bool = False
    is_return: bool = False
    is_indirect_jump: bool = False
    is_conditional_branch: bool = False
    is_csr_access: bool = False
    csr_is_pure_read: bool = False
    is_mret: bool = False
    is_load: bool = False
    is_store: bool = False


def classify(instr):
    """Return the control-flow and access tags of a decoded instruction.

    ``ret`` is only ``jalr x0, 0(x1)``; every other ``jalr`` that does not link into ``ra`` is
    an indirect jump. A CSR access is a pure read when it is a set/clear form whose source is
    hard-wired zero (``x0`` or immediate 0).
    """
    cls = instr.opclass
    is_return = cls is OpClass.JALR and instr.rd == ZERO and instr.rs1 == RA and instr.imm == 0
    is_call = cls in (OpClass.JAL, OpClass.JALR) and instr.rd == RA
    is_csr = cls is OpClass.CSR
    pure_read = is_csr and ((instr.name in ('csrrs', 'csrrc') and instr.rs1 == ZERO) or
                            (instr.name in ('csrrsi', 'csrrci') and instr.imm == 0))
    return ClassTags(
        is_call=is_call,
        is_return=is_return,
        is_indirect_jump=cls is OpClass.JALR and not is_return and not is_call,
        is_conditional_branch=cls is OpClass.BRANCH,
        is_csr_access=is_csr,
        csr_is_pure_read=pure_read,
        is_mret=instr.name == 'mret',
        is_load=cls is OpClass.LOAD,
        is_store=cls is OpClass.STORE,
        )


def writes_register(instr):
    """Return the destination register written by the instruction or None (x0 writes are None)."""
    if instr.spec.fmt in (_Fmt.S, _Fmt.B, _Fmt.SYS, _Fmt.FENCE):
        return None
    return instr.rd or None


def reads_registers(instr):
    """Return the tuple of source registers read by the instruction."""
    fmt = instr.spec.fmt
    if fmt in (_Fmt.R, _Fmt.S, _Fmt.B):
        return (instr.rs1, instr.rs2)
    elif fmt in (_Fmt.I, _Fmt.SHIFT, _Fmt.CSR):
        return (instr.rs1,)
    return ()


def disassemble(instr):
    """Return the assembly text of an instruction in the assembler's syntax."""
    fmt = instr.spec.fmt
    r = REG_NAMES
    name = instr.name
    if fmt is _Fmt.R:
        return '{} {}, {}, {}'.format(name, r[instr.rd], r[instr.rs1], r[instr.rs2])
    elif fmt is _Fmt.SHIFT:
        return '{} {}, {}, {}'.format(name, r[instr.rd], r[instr.rs1], instr.imm)
    elif fmt is _Fmt.I:
        if instr.opclass in (OpClass.LOAD, OpClass.JALR):
            return '{} {}, {}({})'.format(name, r[instr.rd], instr.imm, r[instr.rs1])
        return '{} {}, {}, {}'.format(name, r[instr.rd], r[instr.rs1], instr.imm)
    elif fmt is _Fmt.S:
        return '{} {}, {}({})'.format(name, r[instr.rs2], instr.imm, r[instr.rs1])
    elif fmt is _Fmt.B:
        return '{} {}, {}, {}'.format(name, r[instr.rs1], r[instr.rs2], instr.imm)
    elif fmt is _Fmt.U:
        return '{} {}, 0x{:x}'.format(name, r[instr.rd], (instr.imm >> 12) & 0xFFFFF)
    elif fmt is _Fmt.J:
        return '{} {}, {}'.format(name, r[instr.rd], instr.imm)
    elif fmt is _Fmt.CSR:
        return '{} {}, {}, {}'.format(name, r[instr.rd], CSR_NAMES.get(instr.csr, hex(instr.csr)), r[instr.rs1])
    elif fmt is _Fmt.CSRI:
        return '{} {}, {}, {}'.format(name, r[instr.rd], CSR_NAMES.get(instr.csr, hex(instr.csr)), instr.imm)
    elif fmt is _Fmt.FENCE:
        return '{} 0x{:x}'.format(name, instr.imm)
    return name
