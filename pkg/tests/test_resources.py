import os
import tempfile

import pytest

import programs


def test_bundled():
    import detrap.resources as rsc

    aliases = [r.alias for r in rsc.get_resources()]
    for alias in ('hello', 'attack', 'mret', 'default_layout', 'bench_baseline', 'bench_detrap',
                  'bench_leaf_baseline', 'bench_leaf_detrap'):
        assert alias in aliases, alias
        assert rsc.has_resource(alias)

    assert rsc.has_resource('detrap/data/hello.s')
    assert rsc.get_text('hello').startswith('# Prints "hello"')
    assert rsc.get_binary('hello') == rsc.get_text('hello').encode('utf-8')
    assert 'section.shadow-stack.size' in rsc.get_text('default_layout')

    source = rsc.get_text('bench_detrap')
    assert source.count('    call work$trampoline\n') == rsc.BENCH_CALLS
    assert '$trampoline' not in rsc.get_text('bench_leaf_detrap')


def test_alias_rules():
    from detrap.resources import Resource

    assert Resource('detrap.data', 'hello.s').alias == 'detrap/data/hello.s'
    assert Resource('detrap.data', 'hello.s', ...).alias == 'hello.s'
    assert Resource('detrap.data', 'hello.s', None).alias == 'hello'
    assert Resource('', '/tmp/programs/attack.s', None).alias == 'attack'
    assert Resource('', 'prog.s').alias == 'prog.s'

    r = Resource('detrap.data', 'hello.s', 'greeting')
    assert r == 'greeting'
    assert r == 'detrap/data/hello.s'
    assert r == 'detrap\\data\\hello.s'
    r.alias = 'hi'
    assert r == 'hi' and r != 'greeting'


def test_register_unregister():
    import detrap.resources as rsc

    with rsc.temp_manager(rsc.ResourceManager()) as man:
        assert not rsc.has_resource('hello')

        first = rsc.register_data(b'first', '', 'prog.s', alias='prog')
        second = rsc.register_data('second', '', 'prog2.s', alias='prog')
        assert first in man and second in man
        assert rsc.get_binary('prog') == b'second'
        assert rsc.get_resources() == [second]

        assert rsc.unregister('prog') is second
        assert rsc.get_binary('prog') == b'first'
        rsc.unregister(first)
        assert not rsc.has_resource('prog')

        with pytest.raises(rsc.ResourceNotAvailable):
            rsc.unregister('prog')

    assert rsc.has_resource('hello')
    assert not rsc.has_resource('prog')


def test_not_available():
    import detrap.resources as rsc

    with pytest.raises(rsc.ResourceNotAvailable):
        rsc.get_text('no-such-program')
    assert rsc.get_text('no-such-program', default='fallback text') == 'fallback text'
    assert rsc.get_resource('no-such-program', default=None) is None
    assert rsc.get_text('no-such-program', fallback='hello') == rsc.get_text('hello')

    with rsc.temp_manager(rsc.ResourceManager()):
        rsc.register('', os.path.join(tempfile.gettempdir(), 'detrap-missing', 'gone.s'), alias='gone')
        with pytest.raises(rsc.ResourceNotAvailable):
            rsc.get_binary('gone')

        rsc.register('detrap.data', 'gone.s', alias='gone2')
        with pytest.raises(rsc.ResourceNotAvailable):
            rsc.get_binary('gone2')


def test_lazy_data():
    import detrap.resources as rsc

    calls = []

    def generate():
        calls.append(1)
        return programs.trusted_snippet(['    li a0, 9'])

    with rsc.temp_manager(rsc.ResourceManager()):
        rsc.register_data(generate, '', 'nine.s', alias=None)
        assert calls == []
        assert rsc.get_text('nine') == rsc.get_text('nine')
        assert calls == [1]

        m = programs.run_program(rsc.get_text('nine'))
        assert (m.status, m.exit_code) == ('halted', 9)


def test_register_directory():
    import detrap.resources as rsc

    with rsc.temp_manager(rsc.ResourceManager()) as man:
        folder = man.register_directory('detrap.data', extensions='.s', alias=None)
        assert [r.alias for r in folder] == ['attack', 'hello', 'mret']
        assert 'detrap/data/hello.s' in folder

        with tempfile.TemporaryDirectory() as tmp:
            for name in ('a.s', 'b.cfg', 'c.txt', 'skip.s'):
                with open(os.path.join(tmp, name), 'w') as f:
                    f.write(name)
            os.mkdir(os.path.join(tmp, 'sub.s'))

            folder = rsc.register_directory('', tmp, extensions=['.s', '.cfg'], exclude='skip.s', alias=None)
            assert [r.alias for r in folder] == ['a', 'b']
            assert rsc.get_text('a') == 'a.s'
            assert rsc.get_text('b') == 'b.cfg'
            assert not rsc.has_resource('c')


def test_read_program():
    import detrap.resources as rsc

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, 'hello.s')
        with open(path, 'wb') as f:
            f.write(b'# local copy\n')
        assert rsc.read_program(path) == b'# local copy\n'

    assert rsc.read_program('hello') == rsc.get_binary('hello')
    with pytest.raises(rsc.ResourceNotAvailable):
        rsc.read_program(os.path.join('no', 'such', 'file.s'))


if __name__ == '__main__':
    test_bundled()
    test_alias_rules()
    test_register_unregister()
    test_not_available()
    test_lazy_data()
    test_register_directory()
    test_read_program()

    print('All tests passed successfully!')
