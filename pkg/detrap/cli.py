"""Command line front end: ``detrap layout|scan|run|bench``.

Exit codes: 0 success, 1 scan findings or security termination (or an overhead mismatch),
2 input or format error, 3 step limit reached.
"""
import sys
import json
import logging
import argparse

from .layout import LayoutError, load_layout, validate_layout, derive_trigger_policy, policy_to_dict
from .image import ProgramError, FormatError
from .assembler import assemble
from .elf import is_elf, load_elf32
from .machine import MachineError, RunState, load
from .scanner import scan, load_whitelist
from .instrument import predicted_overhead, instrumented_functions, count_calls
from .resources import ResourceNotAvailable, read_program


__all__ = [
    'EXIT_OK', 'EXIT_FINDINGS', 'EXIT_INPUT', 'EXIT_STEP_LIMIT', 'DEFAULT_MAX_STEPS',
    'load_image', 'cmd_layout', 'cmd_scan', 'cmd_run', 'cmd_bench', 'make_parser', 'main',
    ]


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FINDINGS = 1
EXIT_INPUT = 2
EXIT_STEP_LIMIT = 3

DEFAULT_MAX_STEPS = 1000000

INPUT_ERRORS = (LayoutError, ProgramError, MachineError, ResourceNotAvailable, OSError)


def _print_json(obj):
    print(json.dumps(obj, indent=2))


def load_image(arg, memory_map):
    """Load a program from a file path or registered alias; ELF files are detected by their magic.

    Raises:
        FormatError: Text input that is not UTF-8.
        ProgramError: Assembler or ELF errors.
        ResourceNotAvailable: `arg` is neither a file nor a registered program.
    """
    data = read_program(arg)
    logger.debug('Loading program %s (%d bytes)', arg, len(data))
    if is_elf(data):
        return load_elf32(data)
    try:
        text = data.decode('utf-8')
    except UnicodeDecodeError as err:
        raise FormatError('{} is neither ELF nor UTF-8 assembly text'.format(arg)) from err
    return assemble(text, memory_map)


def cmd_layout(layout=None, check=None, **kwargs):
    """Print the memory map and trigger policy as JSON.

    Args:
        layout (str)[None]: Layout config file (DETRAP_LAYOUT and then the bundled default otherwise).
        check (str)[None]: Saved map (JSON) or config to re-validate instead.
    """
    memory_map = load_layout(check or layout)
    findings = validate_layout(memory_map)
    out = {'map': memory_map.to_dict(), 'findings': [{'code': f.code, 'message': f.message} for f in findings]}
    if not findings:
        out['policy'] = policy_to_dict(derive_trigger_policy(memory_map))
    _print_json(out)
    return EXIT_FINDINGS if findings else EXIT_OK


def cmd_scan(image, layout=None, whitelist=None, fmt='json', check_trusted=False, **kwargs):
    """Scan a program and print the report."""
    memory_map = load_layout(layout)
    img = load_image(image, memory_map)
    wl = load_whitelist(whitelist, img) if whitelist else None
    report = scan(img, memory_map, wl, check_trusted=check_trusted)
    if fmt == 'human':
        sys.stdout.write(report.format_human())
    else:
        print(report.to_json())
    return EXIT_OK if report.passed else EXIT_FINDINGS


def cmd_run(image, layout=None, max_steps=DEFAULT_MAX_STEPS, trace=False, inject_interrupt=None, **kwargs):
    """Run a program under the trigger policy and print the run summary."""
    memory_map = load_layout(layout)
    img = load_image(image, memory_map)
    machine = load(img, memory_map, derive_trigger_policy(memory_map), trace=sys.stderr if trace else None)
    machine.run(max_steps, interrupts=inject_interrupt or ())
    _print_json(machine.summary())
    if machine.state is RunState.HALTED:
        return EXIT_OK
    elif machine.state is RunState.TERMINATED:
        return EXIT_FINDINGS
    return EXIT_STEP_LIMIT


def _retired(img, memory_map, max_steps):
    machine = load(img, memory_map, derive_trigger_policy(memory_map))
    machine.run(max_steps)
    return machine


def cmd_bench(baseline, instrumented, layout=None, max_steps=DEFAULT_MAX_STEPS, **kwargs):
    """Compare retired instruction counts of a baseline and an instrumented build."""
    memory_map = load_layout(layout)
    base_img = load_image(baseline, memory_map)
    inst_img = load_image(instrumented, memory_map)
    base = _retired(base_img, memory_map, max_steps)
    inst = _retired(inst_img, memory_map, max_steps)
    if base.state is RunState.RUNNING or inst.state is RunState.RUNNING:
        _print_json({'baseline': base.summary(), 'detrap': inst.summary()})
        return EXIT_STEP_LIMIT

    calls = count_calls(base.profile, base_img, instrumented_functions(inst_img))
    delta = inst.counters.retired - base.counters.retired
    out = {
        'retired-baseline': base.counters.retired,
        'retired-detrap': inst.counters.retired,
        'delta': delta,
        'predicted-delta': predicted_overhead(calls),
        'calls': calls,
        }
    _print_json(out)
    return EXIT_OK if delta == out['predicted-delta'] else EXIT_FINDINGS


def _interrupt_at(text):
    key, _, value = text.partition('=')
    if key != 'at' or not value:
        raise argparse.ArgumentTypeError('expected at=<retired-count>, got {!r}'.format(text))
    try:
        return int(value, 0)
    except ValueError:
        raise argparse.ArgumentTypeError('invalid retired count {!r}'.format(value)) from None


def make_parser():
    P = argparse.ArgumentParser('detrap', description='Debug-trigger return address protection toolkit.')
    P.add_argument('--verbose', '-v', action='store_true', help='Log debug messages to standard error.')

    # ===== Sub commands =====
    SUBP = P.add_subparsers(dest='command', help='detrap commands.')
    SUBP.required = True

    LAYOUT_P = SUBP.add_parser('layout', help='Plan the memory map and print it with the trigger policy.')
    LAYOUT_P.set_defaults(func=cmd_layout)
    LAYOUT_P.add_argument('--layout', '-l', type=str, default=None)
    LAYOUT_P.add_argument('--check', '-c', type=str, default=None, help='Re-validate a saved map.')

    SCAN_P = SUBP.add_parser('scan', help='Check untrusted code against the scanning rules.')
    SCAN_P.set_defaults(func=cmd_scan)
    SCAN_P.add_argument('image', type=str, help='Program file (ELF32 or assembly) or registered alias.')
    SCAN_P.add_argument('--layout', '-l', type=str, default=None)
    SCAN_P.add_argument('--whitelist', '-w', type=str, default=None)
    SCAN_P.add_argument('--format', '-f', dest='fmt', choices=('json', 'human'), default='json')
    SCAN_P.add_argument('--check-trusted', action='store_true', help='Report trusted code findings as warnings.')

    RUN_P = SUBP.add_parser('run', help='Simulate a program under the trigger policy.')
    RUN_P.set_defaults(func=cmd_run)
    RUN_P.add_argument('image', type=str)
    RUN_P.add_argument('--layout', '-l', type=str, default=None)
    RUN_P.add_argument('--max-steps', type=int, default=DEFAULT_MAX_STEPS)
    RUN_P.add_argument('--trace', action='store_true', help='Write the instruction trace to standard error.')
    RUN_P.add_argument('--inject-interrupt', type=_interrupt_at, action='append', default=None,
                       metavar='at=N', help='Raise a timer interrupt once N instructions retired.')

    BENCH_P = SUBP.add_parser('bench', help='Compare instruction counts of a baseline and an instrumented build.')
    BENCH_P.set_defaults(func=cmd_bench)
    BENCH_P.add_argument('baseline', type=str)
    BENCH_P.add_argument('instrumented', type=str)
    BENCH_P.add_argument('--layout', '-l', type=str, default=None)
    BENCH_P.add_argument('--max-steps', type=int, default=DEFAULT_MAX_STEPS)
    return P


def main(argv=None):
    """Run the command line. Returns the exit code."""
    P = make_parser()
    ARGS = P.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if ARGS.verbose else logging.WARNING, stream=sys.stderr,
                        format='%(levelname)s %(name)s: %(message)s')

    KWARGS = {name: getattr(ARGS, name) for name in vars(ARGS) if name not in ('func', 'command', 'verbose')}
    try:
        return ARGS.func(**KWARGS)
    except INPUT_ERRORS as err:
        print('error: {}'.format(err), file=sys.stderr)
        return EXIT_INPUT


if __name__ == '__main__':
    sys.exit(main())
