import io
import random
import logging

import pytest

import programs


def step_until_stop(m, limit=10000):
    """Step until something other than a retired instruction happens and return that outcome."""
    from detrap.machine import OutcomeKind

    for _ in range(limit):
        outcome = m.step()
        if outcome.kind is not OutcomeKind.RETIRED:
            return outcome
    raise AssertionError('Machine did not stop')


def test_load_errors():
    from detrap.assembler import assemble
    from detrap.layout import derive_trigger_policy
    from detrap.machine import load, LoadError

    memory_map = programs.default_map()
    policy = derive_trigger_policy(memory_map)
    start = '.section .trusted.text kind=trusted-code base=10000\n_start:\n    nop\n'
    cases = [
        ('.section .trusted.text kind=trusted-code base=800\n_start:\n    nop\n.entry _start\n', 'MMIO-OVERLAP'),
        (start + '.section .data kind=untrusted-data base=2fffc\n    .word 1, 2\n.entry _start\n',
         'SECTION-OUTSIDE-MAP'),
        ('.section .text kind=untrusted-code base=1f000\nmain:\n    nop\n.entry main\n', 'ENTRY'),
        (start + '.section .text kind=untrusted-code base=1f000\nh:\n    ret\n.entry _start\n.handler h\n',
         'NO-TRAP-RETURN'),
        ]
    for source, code in cases:
        with pytest.raises(LoadError) as info:
            load(assemble(source), memory_map, policy)
        assert info.value.code == code, source

    with pytest.raises(LoadError) as info:
        load(assemble(start + '.entry _start\n'), memory_map, policy + policy)
    assert info.value.code == 'POLICY-TRUNCATED'


def test_load_state():
    from detrap.isa import SP, SSP

    m = programs.boot(programs.trusted_snippet(['    li a0, 0']))
    assert m.pc == 0x10000
    assert m.reg(SP) == 0x28000
    assert m.reg(SSP) == 0x1E000
    assert m.status == 'running'
    assert [start for start, _ in m.triggers.runs()] == [0, 2, 3]


def test_alu_edge_cases():
    cases = [
        (['li a0, -7', 'li a1, 2', 'div a0, a0, a1'], 0xFFFFFFFD),
        (['li a0, -7', 'li a1, 2', 'rem a0, a0, a1'], 0xFFFFFFFF),
        (['li a0, 7', 'div a0, a0, zero'], 0xFFFFFFFF),
        (['li a0, 7', 'divu a0, a0, zero'], 0xFFFFFFFF),
        (['li a0, 7', 'rem a0, a0, zero'], 7),
        (['li a0, 7', 'remu a0, a0, zero'], 7),
        (['li a0, 0x80000000', 'li a1, -1', 'div a0, a0, a1'], 0x80000000),
        (['li a0, 0x80000000', 'li a1, -1', 'rem a0, a0, a1'], 0),
        (['li a0, -1', 'mulh a0, a0, a0'], 0),
        (['li a0, -1', 'mulhu a0, a0, a0'], 0xFFFFFFFE),
        (['li a0, -1', 'mulhsu a0, a0, a0'], 0xFFFFFFFF),
        (['li a0, 0x10000', 'mul a0, a0, a0'], 0),
        (['li a0, -16', 'srai a0, a0, 2'], 0xFFFFFFFC),
        (['li a0, -16', 'srli a0, a0, 2'], 0x3FFFFFFC),
        (['li a1, 33', 'li a0, 1', 'sll a0, a0, a1'], 2),
        (['li a1, -1', 'li a2, 1', 'slt a0, a1, a2'], 1),
        (['li a1, -1', 'li a2, 1', 'sltu a0, a1, a2'], 0),
        (['li a0, 5', 'sltiu a0, a0, -1'], 1),
        (['li a0, 5', 'slti a0, a0, -1'], 0),
        (['li t0, 0x1C000', 'li t1, 0x80', 'sb t1, 0(t0)', 'lb a0, 0(t0)'], 0xFFFFFF80),
        (['li t0, 0x1C000', 'li t1, 0x80', 'sb t1, 0(t0)', 'lbu a0, 0(t0)'], 0x80),
        (['li t0, 0x1C000', 'li t1, 0x8001', 'sh t1, 2(t0)', 'lh a0, 2(t0)'], 0xFFFF8001),
        (['auipc a0, 0'], 0x10000),
        (['li a0, 3', 'li a1, 3', 'bne a0, a1, .Lout', 'li a0, 9', '.Lout:'], 9),
        ]
    for lines, expected in cases:
        m = programs.run_program(programs.trusted_snippet(['    ' + line for line in lines]))
        assert (m.status, m.exit_code) == ('halted', expected), (lines, m.summary())


def test_untrusted_store_is_suppressed():
    from detrap.machine import Cause, OutcomeKind
    from detrap.runtime import Violation

    source = programs.untrusted_program(['    li t0, 0x1C100', '    li t1, 0x41', '    sw t1, 0(t0)',
                                         '    li a0, 0', '    ret'])
    m = programs.boot(source)
    outcome = step_until_stop(m)
    assert outcome.kind is OutcomeKind.TERMINATED
    assert outcome.cause == Cause.BREAKPOINT
    assert outcome.hit.index == 0 and outcome.hit.length == 2
    assert m.reason is Violation.WRITE
    assert m.read(0x1C100) == 0
    assert m.read(m.pc) == 0x0062A023  # sw t1, 0(t0)
    assert m.counters.policy_violations == 1
    assert m.summary()['reason'] == 'WriteViolation'

    m = programs.run_program(programs.trusted_snippet(['    li t0, 0x1C100', '    li t1, 0x41', '    sw t1, 0(t0)',
                                                       '    lw a0, 0(t0)']))
    assert (m.status, m.exit_code) == ('halted', 0x41)
    assert m.counters.policy_violations == 0


def test_attack_fixture():
    from detrap.resources import get_text
    from detrap.runtime import Violation

    m = programs.run_program(get_text('attack'))
    assert m.status == 'terminated' and m.reason is Violation.WRITE
    assert m.read(0x18000) == 0x5EC2E7


def test_unhandled_exceptions():
    cases = [
        (['    ebreak'], 0x103),
        (['    ecall'], 0x10B),
        (['    .word 0xffffffff'], 0x102),
        (['    li t0, 0x1F002', '    jr t0'], 0x100),
        (['    li t0, 0x40000', '    jr t0'], 0x101),
        (['    li t0, 0x40000', '    lw a0, 0(t0)'], 0x105),
        (['    li t0, 0x28002', '    sw t0, 0(t0)'], 0x106),
        (['    li t0, 0x28001', '    lw a0, 0(t0)'], 0x104),
        (['    li t0, 0x40000', '    sw t0, 0(t0)'], 0x107),
        ]
    for lines, code in cases:
        m = programs.run_program(programs.untrusted_program(lines + ['    li a0, 0', '    ret']))
        assert (m.status, m.exit_code) == ('halted', code), (lines, m.summary())
        assert m.counters.traps == 1


def test_mret_and_trusted_faults():
    from detrap.resources import get_text
    from detrap.runtime import Violation

    m = programs.run_program(get_text('mret'))
    assert m.status == 'terminated' and m.reason is Violation.MRET

    m = programs.run_program(programs.trusted_snippet(['    .word 0xffffffff']))
    assert m.status == 'terminated' and m.reason is Violation.TRUSTED_FAULT
    assert m.pc == 0x10000

    m = programs.run_program(programs.trusted_snippet(['    li a7, 0x555', '    ecall']))
    assert m.reason is Violation.TRUSTED_FAULT


def test_step_limit_and_done_outcomes():
    from detrap.machine import OutcomeKind

    m = programs.boot(programs.trusted_snippet(['.Lspin:', '    j .Lspin']))
    assert m.step().kind is OutcomeKind.RETIRED
    m.run(max_steps=99)
    assert m.status == 'step-limit'
    assert m.counters.retired == 100

    m = programs.run_program(programs.trusted_snippet(['    li a0, 2']))
    assert m.status == 'halted'
    assert m.step().kind is OutcomeKind.HALTED
    assert m.counters.retired == 3


def test_trace_and_determinism():
    from detrap.resources import get_text

    traces = []
    summaries = []
    for _ in range(2):
        trace = io.StringIO()
        m = programs.run_program(get_text('hello'), trace=trace)
        traces.append(trace.getvalue())
        summaries.append(m.summary())
    assert traces[0] == traces[1]
    assert summaries[0] == summaries[1]
    assert summaries[0]['console'] == 'hello\n'
    assert summaries[0]['status'] == 'halted' and summaries[0]['code'] == 0

    lines = traces[0].splitlines()
    assert len(lines) == summaries[0]['retired']
    assert lines[0].startswith('pc=0x00010000 instr=0x')
    assert sum(1 for line in lines if line.endswith(' store addr=0x00001000')) == 6


class ListHandler(logging.Handler):
    def __init__(self):
        super().__init__(logging.DEBUG)
        self.records = []

    def emit(self, record):
        self.records.append(record)


def test_policy_reprogram_warning():
    handler = ListHandler()
    logger = logging.getLogger('detrap.machine')
    logger.addHandler(handler)
    try:
        m = programs.run_program(programs.untrusted_program(['    csrw tselect, zero', '    csrw tdata1, zero',
                                                             '    li a0, 0', '    ret']))
    finally:
        logger.removeHandler(handler)
    assert (m.status, m.exit_code) == ('halted', 0)
    assert not m.triggers.config(0).enabled
    assert any(r.levelno == logging.WARNING and 'reprogrammed' in r.getMessage() for r in handler.records)


def test_random_store_suppression():
    from detrap.assembler import assemble

    rng = random.Random(7)
    sizes = {'sw': 4, 'sh': 2, 'sb': 1}
    images = {op: assemble(programs.untrusted_program(['    {} a1, 0(a0)'.format(op), '    li a0, 0', '    ret']),
                           programs.default_map())
              for op in sizes}
    for _ in range(1000):
        op = rng.choice(sorted(sizes))
        size = sizes[op]
        address = rng.randrange(0x10000, 0x30000, size)
        if rng.random() < 0.05:
            address = rng.choice((0x1EFFC, 0x26FFC, 0x27000)) & ~(size - 1)
        value = rng.randrange(1 << 32)
        m = programs.boot(images[op])
        m.set_reg(10, address)
        m.set_reg(11, value)
        before = m.read(address, size)
        m.run()
        if address < 0x27000:
            assert m.status == 'terminated', (op, hex(address))
            assert m.reason.value == 'WriteViolation'
            assert m.read(address, size) == before
        else:
            assert (m.status, m.exit_code) == ('halted', 0), (op, hex(address))
            assert m.read(address, size) == value & ((1 << (8 * size)) - 1)


def test_stack_overflow_is_stopped():
    from detrap.instrument import FunctionSkeleton, build_program
    from detrap.runtime import Violation

    source = build_program([FunctionSkeleton('rec', False, 256, ['    call rec'])], entry_calls=['rec'])
    m = programs.boot(source)
    low = bytes(m.memory[:0x1E000])
    code = bytes(m.memory[0x1F000:0x27000])
    m.run()
    assert m.status == 'terminated' and m.reason is Violation.WRITE
    assert bytes(m.memory[:0x1E000]) == low
    assert bytes(m.memory[0x1F000:0x27000]) == code


def attack_functions():
    from detrap.instrument import FunctionSkeleton

    return [
        FunctionSkeleton('main', False, 16, ['    call victim', '    li a0, 0']),
        FunctionSkeleton('victim', False, 16, ['    la t0, evil', '    sw t0, 12(sp)']),
        FunctionSkeleton('evil', True, 0, ['    li a0, 66', '    j __detrap_exit']),
        ]


def test_return_address_attack():
    from detrap.assembler import assemble
    from detrap.instrument import build_program

    img = assemble(build_program(attack_functions()), programs.default_map())
    m = programs.run_program(img)
    assert (m.status, m.exit_code) == ('halted', 0)
    assert m.profile[img.address_of('evil')] == 0

    m = programs.run_program(build_program(attack_functions(), instrument=False), policy=[])
    assert (m.status, m.exit_code) == ('halted', 66)


def test_shadow_stack_overflow():
    from detrap.instrument import FunctionSkeleton, build_program
    from detrap.runtime import Violation

    rec = FunctionSkeleton('rec', False, 16, ['    beqz a0, .Lrec_done', '    addi a0, a0, -1', '    call rec',
                                              '.Lrec_done:'])
    source = build_program([rec], entry_calls=['rec'])
    for entries in (4, 64, 1024):
        memory_map = programs.custom_map(shadow_stack=4 * entries, untrusted_stack=0x8000)

        m = programs.boot(source, memory_map)
        m.set_reg(10, entries - 1)
        m.run(max_steps=200000)
        assert m.status == 'terminated' and m.reason is Violation.SHADOW_OVERFLOW, entries

        m = programs.boot(source, memory_map)
        m.set_reg(10, entries - 2)
        m.run(max_steps=200000)
        assert (m.status, m.exit_code) == ('halted', 0), entries


def test_interrupts_without_handler():
    m = programs.boot(programs.trusted_snippet(['    li a0, 1']))
    m.inject_interrupt()
    m.run()
    assert (m.status, m.exit_code) == ('halted', 1)
    assert m.counters.traps == 0  # MIE never set

    m = programs.boot(programs.untrusted_program(['    li a0, 4', '    nop', '    nop', '    ret']))
    m.run(interrupts=[3])
    assert (m.status, m.exit_code) == ('halted', 4)
    assert m.counters.traps == 1


if __name__ == '__main__':
    test_load_errors()
    test_load_state()
    test_alu_edge_cases()
    test_untrusted_store_is_suppressed()
    test_attack_fixture()
    test_unhandled_exceptions()
    test_mret_and_trusted_faults()
    test_step_limit_and_done_outcomes()
    test_trace_and_determinism()
    test_policy_reprogram_warning()
    test_random_store_suppression()
    test_stack_overflow_is_stopped()
    test_return_address_attack()
    test_shadow_stack_overflow()
    test_interrupts_without_handler()

    print('All tests passed successfully!')
