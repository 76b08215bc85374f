"""Instrumentation emitter, trusted runtime stubs and whole-program builder.

Non-leaf functions save their return address through a trusted trampoline that pushes it
onto the shadow stack (x18, growing upward), and restore it from there in the epilogue::

    foo:                            # untrusted, only with external linkage
        j foo$trampoline
    foo$postjump:
        addi sp, sp, -F
        sw ra, F-4(sp)
        ...body...
        addi x18, x18, -4
        lw ra, 0(x18)
        addi sp, sp, F
        ret

    foo$trampoline:                 # trusted
        sw ra, 0(x18)
        addi x18, x18, 4
        j foo$postjump

Direct calls to foo are retargeted to foo$trampoline. Leaf functions keep ra in the register.
"""
import re
from dataclasses import dataclass, field

from .layout import CONSOLE_OFFSET
from .image import SkeletonError


__all__ = [
    'TRAMPOLINE_SUFFIX', 'POSTJUMP_SUFFIX', 'SERVICE_EXIT', 'SERVICE_SETJMP', 'SERVICE_LONGJMP',
    'SERVICE_SETJMP_RELEASE', 'SERVICE_TRAP_RETURN', 'SERVICES', 'RUNTIME_SYMBOLS', 'EXTRA_PER_CALL',
    'FunctionSkeleton', 'Fragments', 'check_skeleton', 'instrument_function', 'baseline_function',
    'retarget_calls', 'runtime_source', 'switch_dispatch', 'checked_icall', 'build_program',
    'predicted_overhead', 'instrumented_functions', 'count_calls',
    ]


TRAMPOLINE_SUFFIX = '$trampoline'
POSTJUMP_SUFFIX = '$postjump'

# ecall service numbers (a7) handled by the trusted runtime
SERVICE_EXIT = 93
SERVICE_SETJMP = 0x100
SERVICE_LONGJMP = 0x101
SERVICE_SETJMP_RELEASE = 0x102
SERVICE_TRAP_RETURN = 0x103
SERVICES = {
    '__detrap_exit': SERVICE_EXIT,
    '__detrap_setjmp': SERVICE_SETJMP,
    '__detrap_longjmp': SERVICE_LONGJMP,
    '__detrap_setjmp_release': SERVICE_SETJMP_RELEASE,
    '__detrap_trap_return': SERVICE_TRAP_RETURN,
    }
RUNTIME_SYMBOLS = ('_start', '__detrap_putchar') + tuple(SERVICES)

EXTRA_PER_CALL = 4  # sw/addi/j in the trampoline plus the extra epilogue instruction

_FORBIDDEN = {'ra', 'x1', 'x18', 's2', 'ssp'}
_TOKEN_RE = re.compile(r'[A-Za-z_.$%][\w.$]*')
_LABEL_RE = re.compile(r'^\s*[A-Za-z_.$][\w.$]*\s*:')


@dataclass
class FunctionSkeleton:
    """Function body plus what the emitter needs to frame it.

    ``body`` holds assembly lines that never touch ra or x18 and never return; the emitter
    owns the frame, the return address and the return.
    """
    name: str
    leaf: bool
    frame_size: int = 0
    body: list = field(default_factory=list)
    external_linkage: bool = True
    calls_setjmp: bool = False


@dataclass
class Fragments:
    untrusted: list
    trusted: list = field(default_factory=list)


def _statement(line):
    """Return (mnemonic, operand tokens) of a body line with labels and comments removed."""
    text = line.split('#', 1)[0]
    while True:
        m = _LABEL_RE.match(text)
        if m is None:
            break
        text = text[m.end():]
    parts = text.strip().split(None, 1)
    if not parts:
        return None, []
    return parts[0].lower(), _TOKEN_RE.findall(parts[1]) if len(parts) > 1 else []


def _is_call(mnemonic, tokens):
    return mnemonic == 'call' or (mnemonic in ('jal', 'jalr') and len(tokens) == 1)


def check_skeleton(f):
    """Validate a skeleton.

    Raises:
        SkeletonError: Body names ra/x18, returns or tail-calls, a leaf calls, or a non-leaf frame is
            not a positive multiple of 16.
    """
    if f.frame_size < 0 or f.frame_size % 16:
        raise SkeletonError('{}: frame size {} is not a multiple of 16'.format(f.name, f.frame_size))
    if not f.leaf and f.frame_size == 0:
        raise SkeletonError('{}: non-leaf function needs a frame to hold ra'.format(f.name))
    if f.leaf and f.calls_setjmp:
        raise SkeletonError('{}: leaf function cannot call setjmp'.format(f.name))
    for line in f.body:
        mnemonic, tokens = _statement(line)
        if mnemonic is None:
            continue
        if mnemonic in ('ret', 'tail', 'mret'):
            raise SkeletonError('{}: body may not use {!r}'.format(f.name, mnemonic))
        touched = _FORBIDDEN.intersection(t.lower() for t in tokens)
        if touched:
            raise SkeletonError('{}: body touches {} ({!r})'.format(f.name, sorted(touched)[0], line.strip()))
        if f.leaf and _is_call(mnemonic, tokens):
            raise SkeletonError('{}: leaf function makes a call ({!r})'.format(f.name, line.strip()))


def _leaf_lines(f):
    lines = ['{}:'.format(f.name)]
    if f.frame_size:
        lines.append('    addi sp, sp, -{}'.format(f.frame_size))
    lines.extend(f.body)
    if f.frame_size:
        lines.append('    addi sp, sp, {}'.format(f.frame_size))
    lines.append('    ret')
    return lines


def instrument_function(f, ssp_reg='x18'):
    """Return the untrusted and trusted fragments of a function.

    Args:
        f (FunctionSkeleton): Function to frame.
        ssp_reg (str)['x18']: Shadow stack pointer register.

    Returns:
        fragments (Fragments): ``untrusted`` lines and the ``trusted`` trampoline (empty for leaves).
    """
    check_skeleton(f)
    if f.leaf:
        return Fragments(_leaf_lines(f))

    frame = f.frame_size
    trampoline = f.name + TRAMPOLINE_SUFFIX
    postjump = f.name + POSTJUMP_SUFFIX
    untrusted = []
    if f.external_linkage:
        untrusted += ['{}:'.format(f.name), '    j {}'.format(trampoline), '{}:'.format(postjump)]
    else:
        untrusted += ['{}:'.format(f.name), '{}:'.format(postjump)]
    untrusted += ['    addi sp, sp, -{}'.format(frame), '    sw ra, {}(sp)'.format(frame - 4)]
    untrusted += list(f.body)
    if f.calls_setjmp:
        untrusted.append('    call __detrap_setjmp_release')
    untrusted += [
        '    addi {0}, {0}, -4'.format(ssp_reg),
        '    lw ra, 0({})'.format(ssp_reg),
        '    addi sp, sp, {}'.format(frame),
        '    ret',
        ]
    trusted = [
        '{}:'.format(trampoline),
        '    sw ra, 0({})'.format(ssp_reg),
        '    addi {0}, {0}, 4'.format(ssp_reg),
        '    j {}'.format(postjump),
        ]
    return Fragments(untrusted, trusted)


def baseline_function(f):
    """Return the uninstrumented form of a function (ra saved and restored on the normal stack)."""
    check_skeleton(f)
    if f.leaf:
        return Fragments(_leaf_lines(f))
    frame = f.frame_size
    lines = ['{}:'.format(f.name), '    addi sp, sp, -{}'.format(frame), '    sw ra, {}(sp)'.format(frame - 4)]
    lines += list(f.body)
    if f.calls_setjmp:
        lines.append('    call __detrap_setjmp_release')
    lines += ['    lw ra, {}(sp)'.format(frame - 4), '    addi sp, sp, {}'.format(frame), '    ret']
    return Fragments(lines)


def retarget_calls(lines, names):
    """Rewrite direct calls (``call f``/``jal f``/``jal ra, f``) to names in `names` to their trampolines."""
    out = []
    pattern = re.compile(r'^(\s*(?:[A-Za-z_.$][\w.$]*\s*:\s*)*)(call|jal)(\s+)(?:(ra|x1)(\s*,\s*))?([\w.$]+)(\s*(?:#.*)?)$')
    for line in lines:
        m = pattern.match(line)
        if m and m.group(6) in names:
            prefix, mnemonic, space, reg, comma, target, rest = m.groups()
            line = '{}{}{}{}{}{}'.format(prefix, mnemonic, space, (reg or '') + (comma or ''),
                                         target + TRAMPOLINE_SUFFIX, rest)
        out.append(line)
    return out


def runtime_source(entry_calls=('main',), console_address=CONSOLE_OFFSET):
    """Return the trusted runtime: ``_start`` plus the stubs that reach the host runtime with ecall.

    ``_start`` enables machine interrupts, calls every entry function in order and exits with the
    last returned a0.
    """
    lines = ['.sym _start . function', '_start:', '    csrrsi x0, mstatus, 8']
    lines += ['    call {}'.format(name) for name in entry_calls]
    lines += ['    call __detrap_exit']
    lines += [
        '.sym __detrap_exit . function', '__detrap_exit:',
        '    li a7, {}'.format(SERVICE_EXIT), '    ecall', '    j __detrap_exit',
        '.sym __detrap_putchar . function', '__detrap_putchar:',
        '    li t0, 0x{:x}'.format(console_address), '    sb a0, 0(t0)', '    ret',
        ]
    for name in ('__detrap_setjmp', '__detrap_longjmp', '__detrap_setjmp_release'):
        lines += ['.sym {} . function'.format(name), '{}:'.format(name),
                  '    li a7, {}'.format(SERVICES[name]), '    ecall', '    ret']
    lines += ['.sym __detrap_trap_return . function', '__detrap_trap_return:',
              '    li a7, {}'.format(SERVICE_TRAP_RETURN), '    ecall', '    j __detrap_trap_return']
    return lines


def switch_dispatch(index_reg, table, count, default, uid=0):
    """Return a bounds-checked dispatch through a rodata jumptable.

    The check block ends in the ``bgeu`` so the table load block has it as sole predecessor.
    Clobbers t1, t2, t3.
    """
    return [
        '    li t1, {}'.format(count),
        '    bgeu {}, t1, {}'.format(index_reg, default),
        '.Lswitch{}:'.format(uid),
        '    slli t2, {}, 2'.format(index_reg),
        '    lui t3, %hi({})'.format(table),
        '    addi t3, t3, %lo({})'.format(table),
        '    add t2, t2, t3',
        '    lw t2, 0(t2)',
        '    jr t2',
        ]


def checked_icall(pointer_reg, table, count, fail, uid=0):
    """Return an indirect call through `pointer_reg` checked against a code jumptable.

    ``t = pointer - table`` must be below ``count*4`` and word aligned; the alignment bits are
    folded into the top of ``t`` so a single unsigned compare carries both conditions.
    Clobbers t0, t1, t2.
    """
    return [
        '    la t0, {}'.format(table),
        '    sub t1, {}, t0'.format(pointer_reg),
        '    slli t2, t1, 30',
        '    or t1, t1, t2',
        '    li t2, {}'.format(count * 4),
        '    bgeu t1, t2, {}'.format(fail),
        '.Licall{}:'.format(uid),
        '    jalr {}'.format(pointer_reg),
        ]


def build_program(functions, entry_calls=('main',), instrument=True, handler=None, switch_tables=None,
                  icall_tables=None, data=None, console_address=CONSOLE_OFFSET):
    """Return the assembly source of a whole program.

    Args:
        functions (list): FunctionSkeleton objects placed in untrusted code.
        entry_calls (list)[('main',)]: Functions ``_start`` calls in order.
        instrument (bool)[True]: Emit the shadow stack instrumentation, else the baseline form.
        handler (str)[None]: Name of the function to register as untrusted trap handler.
        switch_tables (dict)[None]: rodata jumptables, label -> list of code labels.
        icall_tables (dict)[None]: Code jumptables, label -> list of function names (``j <function>``).
        data (dict)[None]: Untrusted data words, label -> list of word expressions.
        console_address (int)[0x1000]: MMIO console word.

    Returns:
        source (str): Text for ``assemble`` with ``base=auto`` sections.
    """
    functions = list(functions)
    names = [f.name for f in functions]
    if len(set(names)) != len(names):
        raise SkeletonError('duplicate function names')
    nonleaf = {f.name for f in functions if not f.leaf} if instrument else set()

    trusted = ['.section .trusted.text kind=trusted-code trust=trusted base=auto']
    runtime = runtime_source(entry_calls, console_address)
    trusted += retarget_calls(runtime, nonleaf)

    untrusted = ['.section .text kind=untrusted-code trust=untrusted base=auto']
    for f in functions:
        frags = instrument_function(f) if instrument else baseline_function(f)
        body = retarget_calls(frags.untrusted, nonleaf)
        untrusted.append('.sym {} . function'.format(f.name))
        untrusted += body
        if frags.trusted:
            trusted.append('.sym {}{} . function'.format(f.name, TRAMPOLINE_SUFFIX))
            trusted += frags.trusted

    for label, targets in sorted((icall_tables or {}).items()):
        untrusted += ['.sym {} . jumptable'.format(label), '{}:'.format(label)]
        untrusted += ['    j {}'.format(target) for target in targets]
        untrusted.append('.jumptable {} {}'.format(label, len(targets)))

    lines = trusted + untrusted
    if switch_tables:
        lines.append('.section .rodata kind=rodata trust=trusted base=auto')
        for label, targets in sorted(switch_tables.items()):
            lines += ['.sym {} . jumptable'.format(label), '{}:'.format(label)]
            lines += ['    .word {}'.format(target) for target in targets]
            lines.append('.jumptable {} {}'.format(label, len(targets)))
    if data:
        lines.append('.section .data kind=untrusted-data trust=untrusted base=auto')
        for label, words in sorted(data.items()):
            lines += ['.sym {} . object'.format(label), '{}:'.format(label)]
            lines += ['    .word {}'.format(word) for word in words]

    lines.append('.entry _start')
    if handler is not None:
        lines.append('.handler {}'.format(handler))
    return '\n'.join(lines) + '\n'


def predicted_overhead(calls):
    """Return the extra retired instructions for `calls` dynamic non-leaf calls."""
    return EXTRA_PER_CALL * calls


def instrumented_functions(img):
    """Return the names of functions that have a trampoline in the image."""
    suffix = TRAMPOLINE_SUFFIX
    return sorted(sym.name[:-len(suffix)] for sym in img.functions() if sym.name.endswith(suffix))


def count_calls(profile, img, names):
    """Return how often execution entered the named functions according to a per-pc profile."""
    total = 0
    for name in names:
        sym = img.symbol(name)
        if sym is not None:
            total += profile.get(sym.address, 0)
    return total
