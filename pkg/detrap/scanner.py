"""Static verifier for untrusted code.

The scanner recovers a control-flow graph over every piece of code reachable from the image's
roots (entry point, function symbols, jumptable entries and the trap handler), resolves indirect
jumps that are protected by a bounds check, and then checks the rules below over untrusted code:

=====  ==============  =============================================================
Rule   Name            Meaning
=====  ==============  =============================================================
R0     DECODE          Reachable word that does not decode
R1     RET-INTEGRITY   ``ret`` while ra may hold something other than the call's value
R2     SSP-DISCIPLINE  x18 written by anything but the canonical epilogue decrement
R3     CSR-POLICY      Write access to a debug or trap CSR
R4     MRET            ``mret`` in untrusted code
R5     INDIRECT        Indirect jump that is not resolved, checked or whitelisted
R6     ALIGN           Destination that is misaligned or outside code
R7     SPILL           Bounds check operand reloaded from the stack
GAP    GAP             Unreachable, symbol-less untrusted code (warning)
=====  ==============  =============================================================
"""
import re
import enum
import json
import itertools
import logging
from dataclasses import dataclass, field

import networkx as nx

from . import isa
from .isa import decode, classify, writes_register, IllegalInstruction, OpClass
from .image import ParseError, UnknownSymbol, SymbolKind


__all__ = [
    'ScanError', 'DecodeError', 'RULES', 'ERROR', 'WARNING', 'CSR_DENYLIST', 'EdgeKind', 'RaState',
    'Finding', 'ScanReport', 'JumpSite', 'WhitelistEntry', 'Whitelist', 'Cfg',
    'build_cfg', 'scan', 'parse_whitelist', 'load_whitelist',
    ]


logger = logging.getLogger(__name__)


class ScanError(Exception):
    pass


class DecodeError(ScanError):
    def __init__(self, address, reason=''):
        self.address = address
        self.reason = reason
        super().__init__('undecodable reachable word at 0x{:08x}{}'.format(address, ': ' + reason if reason else ''))


RULES = {
    'R0': 'DECODE',
    'R1': 'RET-INTEGRITY',
    'R2': 'SSP-DISCIPLINE',
    'R3': 'CSR-POLICY',
    'R4': 'MRET',
    'R5': 'INDIRECT',
    'R6': 'ALIGN',
    'R7': 'SPILL',
    'GAP': 'GAP',
    }

ERROR = 'error'
WARNING = 'warning'

CSR_DENYLIST = frozenset(isa.CSRS[name] for name in (
    'tselect', 'tdata1', 'tdata2', 'tdata3', 'mtvec', 'mepc', 'mcause', 'mstatus'))

_LOOKBACK_BLOCKS = 4


class EdgeKind(enum.Enum):
    FALL_THROUGH = 'fall-through'
    BRANCH = 'branch'
    CALL = 'call'
    RETURN = 'return'
    INDIRECT_RESOLVED = 'indirect-resolved'
    INDIRECT_JUMPTABLE = 'indirect-jumptable'


class RaState(enum.IntEnum):
    """Return address state; the meet of two states is the lower one."""
    CLOBBERED = 0
    SAVED_TO_SHADOW = 1
    PRISTINE = 2


# ----- report -----
@dataclass(frozen=True, order=True)
class Finding:
    address: int
    rule: str
    message: str
    severity: str = ERROR

    def to_dict(self):
        return {'rule': self.rule, 'address': '0x{:08x}'.format(self.address),
                'message': self.message, 'severity': self.severity}

    def __str__(self):
        return '{} 0x{:08x} {}'.format(self.rule, self.address, self.message)


@dataclass
class ScanReport:
    findings: list = field(default_factory=list)

    def __post_init__(self):
        self.findings = sorted(set(self.findings))

    @property
    def errors(self):
        return [f for f in self.findings if f.severity == ERROR]

    @property
    def warnings(self):
        return [f for f in self.findings if f.severity == WARNING]

    @property
    def verdict(self):
        return 'fail' if self.errors else 'pass'

    @property
    def passed(self):
        return not self.errors

    def rules(self, severity=ERROR):
        return {f.rule for f in self.findings if severity is None or f.severity == severity}

    def to_dict(self):
        return {'verdict': self.verdict, 'findings': [f.to_dict() for f in self.findings]}

    def to_json(self, indent=2):
        return json.dumps(self.to_dict(), indent=indent)

    def format_human(self):
        lines = [str(f) for f in self.findings]
        lines.append('verdict: {}'.format(self.verdict))
        return '\n'.join(lines) + '\n'


# ----- whitelist -----
@dataclass(frozen=True)
class JumpSite:
    pc: int
    destinations: tuple


@dataclass
class WhitelistEntry:
    symbol: str
    sites: list = field(default_factory=list)


@dataclass
class Whitelist:
    """Developer-vetted indirect jumps: per function, jump sites and their allowed destinations."""
    entries: list = field(default_factory=list)

    def destinations(self, pc):
        """Return the allowed destinations of the jump at `pc` or None when it is not listed."""
        found = None
        for entry in self.entries:
            for site in entry.sites:
                if site.pc == pc:
                    found = (found or ()) + site.destinations
        return tuple(sorted(set(found))) if found is not None else None

    def __len__(self):
        return sum(len(entry.sites) for entry in self.entries)


_ALLOW_RE = re.compile(r'^allow\s+(\S+)\s+(0[xX][0-9a-fA-F]+|[0-9a-fA-F]+)\s*->\s*(\S.*)$')


def _hex(text):
    return int(text, 16)


def parse_whitelist(text, image=None):
    """Parse ``allow <symbol> <pc-hex> -> <dest-hex>[,<dest-hex>...]`` lines.

    Blank lines and ``#`` comments are ignored.

    Args:
        text (str): Whitelist text.
        image (Image)[None]: When given, every symbol must exist in it.

    Raises:
        ParseError: SYNTAX for malformed lines, UNKNOWN-SYMBOL for symbols the image lacks.
    """
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        m = _ALLOW_RE.match(line)
        if m is None:
            raise ParseError('expected "allow <symbol> <pc> -> <dest>[,<dest>...]"', lineno, 1)
        symbol, pc_text, dest_text = m.groups()
        try:
            pc = _hex(pc_text)
            dests = tuple(_hex(d.strip()) for d in dest_text.split(','))
        except ValueError:
            raise ParseError('invalid hex address in {!r}'.format(line), lineno, 1) from None
        if image is not None and image.symbol(symbol) is None:
            raise UnknownSymbol('unknown symbol {!r}'.format(symbol), lineno, raw.find(symbol) + 1)
        entry = entries.setdefault(symbol, WhitelistEntry(symbol))
        entry.sites.append(JumpSite(pc, dests))
    return Whitelist(list(entries.values()))


def load_whitelist(path, image=None):
    with open(path, 'r') as f:
        return parse_whitelist(f.read(), image)


# ----- bounds check recognition -----
class _Kind(enum.Enum):
    CONST = 'const'
    UNKNOWN = 'unknown'
    SCALED = 'scaled'       # unknown << k
    TADDR = 'taddr'         # (unknown << 2) + table
    TLOAD = 'tload'         # word loaded from taddr
    OFFSET = 'offset'       # unknown - table
    MISALIGN = 'misalign'   # offset << 30
    FOLDED = 'folded'       # offset | misalign


@dataclass(frozen=True)
class _Value:
    kind: _Kind
    ident: object = None
    value: int = 0
    spilled: bool = False


_ZERO = _Value(_Kind.CONST, value=0)


class _Evaluator(object):
    """Symbolic run over a straight-line instruction sequence that recognizes bounds checks."""
    def __init__(self):
        self.regs = [_ZERO] + [_Value(_Kind.UNKNOWN, ('in', r)) for r in range(1, 32)]
        self.fresh = itertools.count()
        self.index_checks = {}
        self.pointer_checks = {}
        self.spill_sites = []

    def unknown(self, spilled=False):
        return _Value(_Kind.UNKNOWN, ('t', next(self.fresh)), spilled=spilled)

    def run(self, seq):
        for pc, instr in seq:
            self.step(pc, instr)
        return self

    def step(self, pc, instr):
        a = self.regs[instr.rs1]
        b = self.regs[instr.rs2]
        if instr.name == 'bgeu':
            if a.spilled or b.spilled:
                self.spill_sites.append(pc)
            if b.kind is _Kind.CONST:
                if a.kind is _Kind.UNKNOWN:
                    self.index_checks[a.ident] = min(b.value, self.index_checks.get(a.ident, b.value))
                elif a.kind is _Kind.FOLDED:
                    self.pointer_checks[a.ident] = (a.value, b.value)
            return
        rd = writes_register(instr)
        if rd is not None:
            self.regs[rd] = self.transfer(pc, instr, a, b)

    def transfer(self, pc, instr, a, b):
        name = instr.name
        imm = instr.imm
        mask = 0xFFFFFFFF
        spilled = a.spilled or b.spilled
        if name == 'lui':
            return _Value(_Kind.CONST, value=imm & mask)
        elif name == 'auipc':
            return _Value(_Kind.CONST, value=(pc + imm) & mask)
        elif name == 'addi':
            if a.kind is _Kind.CONST:
                return _Value(_Kind.CONST, value=(a.value + imm) & mask)
            return a if imm == 0 else self.unknown(a.spilled)
        elif name == 'slli':
            if a.kind is _Kind.CONST:
                return _Value(_Kind.CONST, value=(a.value << imm) & mask)
            elif a.kind is _Kind.UNKNOWN:
                return _Value(_Kind.SCALED, a.ident, 1 << imm, a.spilled)
            elif a.kind is _Kind.OFFSET and imm == 30:
                return _Value(_Kind.MISALIGN, a.ident, a.value, a.spilled)
        elif name == 'add':
            if a.kind is _Kind.CONST and b.kind is _Kind.CONST:
                return _Value(_Kind.CONST, value=(a.value + b.value) & mask)
            for x, y in ((a, b), (b, a)):
                if x.kind is _Kind.SCALED and x.value == 4 and y.kind is _Kind.CONST:
                    return _Value(_Kind.TADDR, x.ident, y.value, spilled)
        elif name == 'sub':
            if a.kind is _Kind.CONST and b.kind is _Kind.CONST:
                return _Value(_Kind.CONST, value=(a.value - b.value) & mask)
            if a.kind is _Kind.UNKNOWN and b.kind is _Kind.CONST:
                return _Value(_Kind.OFFSET, a.ident, b.value, spilled)
        elif name == 'or':
            kinds = {a.kind, b.kind}
            if kinds == {_Kind.OFFSET, _Kind.MISALIGN} and a.ident == b.ident and a.value == b.value:
                return _Value(_Kind.FOLDED, a.ident, a.value, spilled)
        elif name == 'lw':
            if a.kind is _Kind.TADDR and imm == 0:
                return _Value(_Kind.TLOAD, a.ident, a.value, a.spilled)
            if instr.rs1 == isa.SP:
                return self.unknown(spilled=True)
        return self.unknown(spilled)


@dataclass
class _Resolution:
    pc: int
    kind: EdgeKind = None
    destinations: tuple = ()
    call: bool = False
    whitelisted: bool = False
    spill_sites: tuple = ()
    bad_entries: tuple = ()
    reason: str = ''

    @property
    def resolved(self):
        return self.kind is not None


# ----- CFG -----
def _is_terminator(instr):
    return instr.opclass in (OpClass.BRANCH, OpClass.JAL, OpClass.JALR) or instr.name == 'mret'


@dataclass
class Cfg:
    """Basic block graph of one image.

    ``graph`` is a networkx MultiDiGraph keyed by block start address. Nodes carry ``end``
    (exclusive), ``instrs`` (list of (pc, Instr)), ``trusted`` and the entry facts ``ra`` and
    ``ssp_delta``; edges are keyed by EdgeKind and carry ``call`` and ``whitelist`` flags.
    """
    image: object
    graph: object
    roots: frozenset = frozenset()
    call_targets: frozenset = frozenset()
    whitelist_roots: frozenset = frozenset()
    decode_errors: dict = field(default_factory=dict)
    referrers: dict = field(default_factory=dict)
    bad_targets: dict = field(default_factory=dict)
    resolutions: dict = field(default_factory=dict)
    whitelist_only: frozenset = frozenset()

    def blocks(self):
        return [(start, self.graph.nodes[start]['end']) for start in sorted(self.graph.nodes)]

    def edges(self, kind=None):
        edges = [(u, v, k.value) for u, v, k in self.graph.edges(keys=True) if kind is None or k is EdgeKind(kind)]
        return sorted(edges)

    def block_of(self, pc):
        for start in self.graph.nodes:
            if start <= pc < self.graph.nodes[start]['end']:
                return start
        return None

    def instructions(self):
        for start in sorted(self.graph.nodes):
            for pc, instr in self.graph.nodes[start]['instrs']:
                yield pc, instr

    def entry_facts(self, start):
        node = self.graph.nodes[start]
        return node.get('ra'), node.get('ssp_delta')


class _Builder(object):
    def __init__(self, img, whitelist=None):
        self.img = img
        self.whitelist = whitelist or Whitelist()
        self.instrs = {}
        self.leaders = set()
        self.decode_errors = {}
        self.referrers = {}
        self.bad_targets = {}
        self.call_targets = set()
        self.whitelist_roots = set()
        self.roots = self.collect_roots()

    def is_code(self, address):
        sec = self.img.code_section_at(address)
        return address % 4 == 0 and sec is not None and address + 4 <= sec.limit

    def check_target(self, pc, target, why='destination'):
        if target % 4:
            self.bad_targets[(pc, target)] = '{} 0x{:08x} is not 4-aligned'.format(why, target)
            return False
        if not self.is_code(target):
            self.bad_targets[(pc, target)] = '{} 0x{:08x} is outside code'.format(why, target)
            return False
        return True

    def collect_roots(self):
        img = self.img
        roots = set()
        candidates = [img.entry] + [sym.address for sym in img.functions()]
        if img.handler is not None:
            candidates.append(img.handler)
        for jt in img.jumptables:
            sec = img.section_at(jt.base)
            if sec is not None and sec.is_code:
                candidates.extend(jt.entries())
            else:
                for address in jt.entries():
                    word = img.read_word(address)
                    if word is not None:
                        candidates.append(word)
        for address in candidates:
            if self.is_code(address):
                roots.add(address)
        return roots

    def explore(self, pending):
        stack = sorted(((pc, None) for pc in pending), reverse=True)
        while stack:
            pc, source = stack.pop()
            if pc in self.decode_errors:
                self.referrers.setdefault(pc, set()).add(source)
                continue
            if pc in self.instrs or not self.is_code(pc):
                continue
            try:
                instr = decode(self.img.read_word(pc))
            except IllegalInstruction as err:
                self.decode_errors[pc] = err.reason or str(err)
                self.referrers.setdefault(pc, set()).add(source)
                continue
            self.instrs[pc] = instr
            for succ in reversed(self.successors(pc, instr)):
                stack.append((succ, pc))

    def successors(self, pc, instr):
        cls = instr.opclass
        after = pc + 4
        if _is_terminator(instr):
            self.leaders.add(after)
        if cls is OpClass.BRANCH:
            target = (pc + instr.imm) & 0xFFFFFFFF
            succ = [after]
            if self.check_target(pc, target):
                self.leaders.add(target)
                succ.append(target)
            return succ
        elif cls is OpClass.JAL:
            target = (pc + instr.imm) & 0xFFFFFFFF
            succ = [after] if instr.rd else []
            if self.check_target(pc, target):
                self.leaders.add(target)
                succ.append(target)
                if instr.rd:
                    self.call_targets.add(target)
            return succ
        elif cls is OpClass.JALR:
            return [after] if instr.rd else []
        elif instr.name == 'mret':
            return []
        return [after]

    def build_graph(self):
        g = nx.MultiDiGraph()
        blocks = []
        starts = self.leaders | self.roots | self.call_targets | self.whitelist_roots
        for pc in sorted(self.instrs):
            prev = self.instrs.get(pc - 4)
            if not blocks or pc in starts or prev is None or _is_terminator(prev):
                blocks.append([])
            blocks[-1].append((pc, self.instrs[pc]))
        for body in blocks:
            start = body[0][0]
            g.add_node(start, end=body[-1][0] + 4, instrs=body, trusted=self.img.is_trusted(start))
        for body in blocks:
            start = body[0][0]
            pc, instr = body[-1]
            after = pc + 4
            cls = instr.opclass
            if not _is_terminator(instr):
                self.add_edge(g, start, after, EdgeKind.FALL_THROUGH)
            elif cls is OpClass.BRANCH:
                self.add_edge(g, start, (pc + instr.imm) & 0xFFFFFFFF, EdgeKind.BRANCH)
                self.add_edge(g, start, after, EdgeKind.FALL_THROUGH)
            elif cls is OpClass.JAL:
                target = (pc + instr.imm) & 0xFFFFFFFF
                if instr.rd:
                    self.add_edge(g, start, target, EdgeKind.CALL, call=True)
                    self.add_edge(g, start, after, EdgeKind.RETURN)
                else:
                    self.add_edge(g, start, target, EdgeKind.BRANCH)
            elif cls is OpClass.JALR and instr.rd:
                self.add_edge(g, start, after, EdgeKind.RETURN)
        return g

    @staticmethod
    def add_edge(g, u, v, kind, call=False, whitelist=False):
        if v in g:
            g.add_edge(u, v, key=kind, call=call, whitelist=whitelist)

    def indirect_sites(self, g):
        for start in sorted(g.nodes):
            pc, instr = g.nodes[start]['instrs'][-1]
            if instr.opclass is OpClass.JALR and not classify(instr).is_return:
                yield start, pc, instr

    @staticmethod
    def lookback(g, start):
        seq = list(g.nodes[start]['instrs'])
        node = start
        for _ in range(_LOOKBACK_BLOCKS):
            preds = [(u, k) for u, _, k, d in g.in_edges(node, keys=True, data=True) if not d['whitelist']]
            if len(preds) != 1 or preds[0][1] is not EdgeKind.FALL_THROUGH:
                break
            node = preds[0][0]
            body = g.nodes[node]['instrs']
            seq = list(body) + seq
            if body[-1][1].opclass is OpClass.BRANCH:
                break
        return seq

    def resolve(self, g, start, pc, instr):
        img = self.img
        call = instr.rd != 0
        ev = _Evaluator().run(self.lookback(g, start)[:-1])
        target = ev.regs[instr.rs1]
        checked = ()
        if target.kind is _Kind.CONST:
            dest = (target.value + instr.imm) & 0xFFFFFFFE
            return _Resolution(pc, EdgeKind.INDIRECT_RESOLVED, (dest,), call)

        if target.kind is _Kind.TLOAD and instr.imm == 0 and target.ident in ev.index_checks:
            checked = tuple(ev.spill_sites)
            jt = img.jumptable_at(target.value)
            bound = ev.index_checks[target.ident]
            if jt is not None and bound <= jt.count:
                dests = tuple(img.read_word(address) for address in jt.entries())
                if None not in dests:
                    return _Resolution(pc, EdgeKind.INDIRECT_JUMPTABLE, dests, call, spill_sites=checked)
        elif target.kind is _Kind.UNKNOWN and instr.imm == 0 and target.ident in ev.pointer_checks:
            checked = tuple(ev.spill_sites)
            base, bound = ev.pointer_checks[target.ident]
            jt = img.jumptable_at(base)
            sec = img.section_at(base)
            if jt is not None and sec is not None and sec.is_code and bound <= jt.count * 4:
                entries = tuple(a for a in jt.entries() if a - base < bound)
                bad = tuple(a for a in entries if not self.jumps_to_function(a))
                return _Resolution(pc, EdgeKind.INDIRECT_JUMPTABLE, entries, call, spill_sites=checked,
                                   bad_entries=bad)
        else:
            checked = tuple(ev.spill_sites)

        allowed = self.whitelist.destinations(pc)
        if allowed is not None:
            return _Resolution(pc, EdgeKind.INDIRECT_RESOLVED, allowed, call, whitelisted=True, spill_sites=checked)
        return _Resolution(pc, call=call, spill_sites=checked,
                           reason='indirect {} through {} is not bounds checked'.format(
                               'call' if call else 'jump', isa.REG_NAMES[instr.rs1]))

    def jumps_to_function(self, address):
        word = self.img.read_word(address)
        try:
            instr = decode(word)
        except (IllegalInstruction, TypeError):
            return False
        if instr.name != 'jal' or instr.rd != 0:
            return False
        target = (address + instr.imm) & 0xFFFFFFFF
        return any(sym.kind is SymbolKind.FUNCTION for sym in self.img.symbols_at(target))

    def build(self):
        pending = set(self.roots)
        iteration = 0
        while True:
            iteration += 1
            self.explore(pending)
            g = self.build_graph()
            resolutions = {}
            new = set()
            for start, pc, instr in self.indirect_sites(g):
                res = resolutions[pc] = self.resolve(g, start, pc, instr)
                for dest in res.destinations:
                    if not self.check_target(pc, dest):
                        continue
                    if res.call:
                        self.call_targets.add(dest)
                    if res.whitelisted:
                        self.whitelist_roots.add(dest)
                    self.leaders.add(dest)
                    if dest not in self.instrs:
                        new.add(dest)
            logger.debug('CFG discovery iteration %d: %d blocks, %d new targets', iteration, len(g), len(new))
            if not new:
                break
            pending = new

        g = self.build_graph()
        for start, pc, instr in self.indirect_sites(g):
            res = resolutions.get(pc)
            if res is None:
                continue
            for dest in res.destinations:
                if (pc, dest) in self.bad_targets:
                    continue
                self.add_edge(g, start, dest, res.kind, call=res.call, whitelist=res.whitelisted)
        return Cfg(self.img, g, frozenset(self.roots), frozenset(self.call_targets),
                   frozenset(self.whitelist_roots), dict(self.decode_errors), dict(self.referrers),
                   dict(self.bad_targets), resolutions, frozenset(_whitelist_only(g, self.roots)))


def _whitelist_only(g, roots):
    """Blocks that are only reachable through whitelisted edges."""
    base = nx.MultiDiGraph()
    base.add_nodes_from(g.nodes)
    base.add_edges_from((u, v, k) for u, v, k, d in g.edges(keys=True, data=True) if not d['whitelist'])
    reached = set()
    for root in roots:
        if root in base and root not in reached:
            reached.add(root)
            reached.update(nx.descendants(base, root))
    return set(g.nodes) - reached


def build_cfg(img, whitelist=None, strict=True):
    """Recover the control-flow graph of an image.

    Args:
        img (Image): Program image.
        whitelist (Whitelist)[None]: Vetted indirect jumps that become edges.
        strict (bool)[True]: Raise on undecodable reachable words instead of recording them.

    Returns:
        cfg (Cfg): Blocks, edges and entry facts.

    Raises:
        DecodeError: A reachable word does not decode (strict mode).
    """
    cfg = _Builder(img, whitelist).build()
    if strict and cfg.decode_errors:
        address = min(cfg.decode_errors)
        raise DecodeError(address, cfg.decode_errors[address])
    _dataflow(cfg)
    return cfg


# ----- dataflow -----
def _canonical_decrement(instr):
    return instr.name == 'addi' and instr.rd == isa.SSP and instr.rs1 == isa.SSP and instr.imm == -4


def _canonical_reload(instr):
    return instr.name == 'lw' and instr.rd == isa.RA and instr.rs1 == isa.SSP and instr.imm == 0


def _ra_after(instr, state, prev):
    """RaState after `instr`; `prev` is the instruction before it in the same block or None."""
    if classify(instr).is_call:
        return RaState.CLOBBERED
    if writes_register(instr) == isa.RA:
        if _canonical_reload(instr) and prev is not None and _canonical_decrement(prev):
            return RaState.SAVED_TO_SHADOW
        return RaState.CLOBBERED
    return state


def _ssp_after(instr, delta):
    if writes_register(instr) != isa.SSP or delta is None:
        return delta
    if instr.name == 'addi' and instr.rs1 == isa.SSP:
        return delta + instr.imm
    return None


_UNSET = object()


def _dataflow(cfg):
    """Compute the entry RaState and shadow stack delta of every block."""
    g = cfg.graph
    ra = {}
    ssp = {}
    work = []
    for start in sorted(cfg.roots | cfg.call_targets | cfg.whitelist_roots):
        if start in g:
            ra[start] = RaState.PRISTINE
            ssp[start] = 0
            work.append(start)
    w_only = cfg.whitelist_only
    while work:
        start = work.pop(0)
        state = ra[start]
        delta = ssp[start]
        prev = None
        for _, instr in g.nodes[start]['instrs']:
            state = _ra_after(instr, state, prev)
            delta = _ssp_after(instr, delta)
            prev = instr
        for _, succ, kind, d in g.out_edges(start, keys=True, data=True):
            if d['call'] or d['whitelist'] or (start in w_only and succ not in w_only):
                continue
            changed = False
            if succ not in ra or state < ra[succ]:
                ra[succ] = min(state, ra.get(succ, state))
                changed = True
            old = ssp.get(succ, _UNSET)
            merged = delta if old is _UNSET else (old if old == delta else None)
            if old is _UNSET or merged != old:
                ssp[succ] = merged
                changed = True
            if changed and succ not in work:
                work.append(succ)
    for start in g.nodes:
        g.nodes[start]['ra'] = ra.get(start)
        g.nodes[start]['ssp_delta'] = ssp.get(start)
    return cfg


# ----- rules -----
class _Collector(object):
    def __init__(self, cfg, memory_map, check_trusted):
        self.cfg = cfg
        self.map = memory_map
        self.check_trusted = check_trusted
        self.findings = []

    def is_trusted(self, pc):
        trusted = self.cfg.image.is_trusted(pc)
        if trusted and self.map is not None:
            trusted = self.map.is_privileged(pc)
        return trusted

    def report(self, rule, pc, message, whitelisted=False):
        if self.is_trusted(pc):
            if not self.check_trusted:
                return
            severity = WARNING
        elif whitelisted or rule == 'GAP':
            severity = WARNING
        else:
            severity = ERROR
        if whitelisted:
            message += ' (only reachable through whitelisted jumps)'
        finding = Finding(pc, rule, message, severity)
        logger.debug('Finding %s', finding)
        self.findings.append(finding)


def _check_block(cfg, collect, start):
    node = cfg.graph.nodes[start]
    w_only = start in cfg.whitelist_only
    state = node['ra'] if node['ra'] is not None else RaState.PRISTINE
    delta = node['ssp_delta']
    instrs = node['instrs']
    prev = None
    for i, (pc, instr) in enumerate(instrs):
        tags = classify(instr)
        if tags.is_return and state is RaState.CLOBBERED:
            collect.report('R1', pc, 'ret with ra not from the call or the shadow stack', w_only)
        elif tags.is_return and delta is not None and delta < 0:
            collect.report('R1', pc, 'ret after popping {} shadow stack bytes the function never pushed'.format(-delta),
                           w_only)
        if writes_register(instr) == isa.SSP:
            following = instrs[i + 1][1] if i + 1 < len(instrs) else None
            if not (_canonical_decrement(instr) and following is not None and _canonical_reload(following)):
                collect.report('R2', pc, 'x18 written by {!r} outside the canonical epilogue'.format(str(instr)),
                               w_only)
        if tags.is_csr_access and instr.csr in CSR_DENYLIST and not tags.csr_is_pure_read:
            collect.report('R3', pc, 'write access to {}'.format(isa.CSR_NAMES[instr.csr]), w_only)
        if tags.is_mret:
            collect.report('R4', pc, 'mret in untrusted code', w_only)
        state = _ra_after(instr, state, prev)
        delta = _ssp_after(instr, delta)
        prev = instr


def scan(img, memory_map=None, whitelist=None, check_trusted=False):
    """Check untrusted code against the rule catalog.

    Args:
        img (Image): Program image.
        memory_map (MemoryMap)[None]: When given, code only counts as trusted if it is also in the
            privileged region.
        whitelist (Whitelist)[None]: Vetted indirect jumps.
        check_trusted (bool)[False]: Report findings in trusted code as warnings.

    Returns:
        report (ScanReport): Findings; the verdict passes iff there are no errors.
    """
    cfg = build_cfg(img, whitelist, strict=False)
    collect = _Collector(cfg, memory_map, check_trusted)
    w_only = cfg.whitelist_only

    for pc, reason in sorted(cfg.decode_errors.items()):
        sources = cfg.referrers.get(pc, set())
        whitelisted = bool(sources) and None not in sources and all(cfg.block_of(s) in w_only for s in sources)
        collect.report('R0', pc, 'undecodable word: {}'.format(reason), whitelisted)

    for start in sorted(cfg.graph.nodes):
        _check_block(cfg, collect, start)

    for pc, res in sorted(cfg.resolutions.items()):
        in_w = cfg.block_of(pc) in w_only
        if not res.resolved:
            collect.report('R5', pc, res.reason, in_w)
        for entry in res.bad_entries:
            collect.report('R5', pc, 'jumptable entry 0x{:08x} does not jump to a function start'.format(entry), in_w)
        for site in res.spill_sites:
            collect.report('R7', site, 'bounds check operand reloaded from the stack', in_w)

    for (pc, dest), message in sorted(cfg.bad_targets.items()):
        res = cfg.resolutions.get(pc)
        whitelisted = (res is not None and res.whitelisted) or cfg.block_of(pc) in w_only
        collect.report('R6', pc, message, whitelisted)

    for base, limit in _gaps(cfg):
        collect.report('GAP', base, 'unreachable code [0x{:08x}, 0x{:08x})'.format(base, limit))

    return ScanReport(collect.findings)


def _gaps(cfg):
    img = cfg.image
    covered = set(pc for pc, _ in cfg.instructions()) | set(cfg.decode_errors)
    for jt in img.jumptables:
        covered.update(range(jt.base, jt.limit, 4))
    symbols = {sym.address for sym in img.symbols}
    for sec in img.sections:
        if not sec.is_code or img.is_trusted(sec.base):
            continue
        run = None
        for address in range(sec.base, sec.limit - sec.limit % 4, 4):
            if address in covered or address in symbols:
                if run is not None:
                    yield run, address
                    run = None
            elif run is None:
                run = address
        if run is not None:
            yield run, sec.limit
