"""Registry of fixture programs and layout configs.

Bundled files in ``detrap.data`` are registered under their stem (``default_layout``, ``hello``,
``attack`` ...). Programs can also be registered from user files, whole directories, or as
generated data; a callable given as data is only called the first time the resource is read.
"""
import os
import contextlib
from importlib.resources import files

from .instrument import FunctionSkeleton, build_program


__all__ = [
    'ResourceNotAvailable', 'MISSING', 'DATA_PACKAGE', 'Resource', 'ResourceManager',
    'get_global_manager', 'set_global_manager', 'temp_manager', 'register', 'register_data',
    'register_directory', 'unregister', 'has_resource', 'get_resources', 'get_resource', 'get_binary',
    'get_text', 'read_program', 'bench_source', 'register_bundled',
    ]


MISSING = object()
DATA_PACKAGE = 'detrap.data'
BUNDLED_EXTENSIONS = ['.cfg', '.s']


class ResourceNotAvailable(Exception):
    pass


class Resource:
    def __init__(self, package, name, alias=MISSING, manager=None, data=None, **kwargs):
        """Initialize the resource object.

        Args:
            package (str): Package holding the file (EX: "detrap.data"). Empty for plain file paths.
            name (str): File name of the resource (EX: "hello.s").
            alias (str)[MISSING]: Shortcut alias name identifier for the resource.
                ... (Ellipsis) will be the name with the extension (EX: "hello.s")
                None will be the name without the extension (EX: "hello")
            manager (ResourceManager)[None]: Manager that holds this object.
            data (bytes/str/callable)[None]: Stored data, or a callable returning it on first read.
            **kwargs (dict): Dictionary of keyword arguments to set as resource attributes.
        """
        self.manager = manager
        self.raw_alias = alias
        self.package = package
        self.name = name
        self.data = data

        for k, v in kwargs.items():
            try:
                setattr(self, k, v)
            except (AttributeError, TypeError, ValueError, Exception):
                pass

    @property
    def package_path(self):
        pkg = self.package.replace('.', '/')
        if pkg and self.name:
            return '/'.join((pkg, self.name))
        return pkg or self.name

    @property
    def alias(self):
        if self.raw_alias is MISSING:
            return self.package_path
        elif self.raw_alias is ...:
            return self.name
        elif self.raw_alias is None:
            return os.path.splitext(os.path.basename(self.name))[0]
        return self.raw_alias

    @alias.setter
    def alias(self, value):
        self.raw_alias = value

    def files(self):
        if not self.package:
            return None
        return files(self.package).joinpath(self.name)

    def read_bytes(self):
        if callable(self.data):
            self.data = self.data()
        if isinstance(self.data, bytes):
            return self.data
        elif isinstance(self.data, str):
            return self.data.encode('utf-8')
        try:
            f = self.files()
            if f is None:
                with open(self.name, 'rb') as fh:
                    self.data = fh.read()
            else:
                self.data = f.read_bytes()
        except (AttributeError, TypeError, OSError, ModuleNotFoundError, Exception) as err:
            raise ResourceNotAvailable('{}: {}'.format(self.alias, err)) from err
        return self.data

    read_binary = read_bytes

    def read_text(self, encoding='utf-8', errors='strict'):
        data = self.read_bytes()
        return data.decode(encoding, errors)

    def __eq__(self, other):
        if isinstance(other, str):
            return other == self.alias or other.replace('\\', '/') == self.package_path
        return super().__eq__(other)

    __hash__ = object.__hash__

    def __repr__(self):
        return '{cls}(package={package}, name={name}, alias={alias})'.format(
            cls=self.__class__.__name__, package=self.package, name=self.name, alias=self.alias)


class ResourceManager(list):
    """List of resources searched newest first by alias or package path."""
    RESOURCE_CLASS = Resource

    def __init__(self, *resources):
        super().__init__()
        for rsc in resources:
            self.append(rsc)

    def __contains__(self, item):
        return any(rsc == item for rsc in self)

    def __getitem__(self, item):
        if isinstance(item, (int, slice)):
            return list.__getitem__(self, item)
        for rsc in reversed(self):
            if rsc == item:
                return rsc
        raise ResourceNotAvailable('The requested resource "{}" was not found!'.format(item))

    def append(self, resource):
        if getattr(resource, 'manager', MISSING) is None:
            resource.manager = self
        return list.append(self, resource)

    def register(self, package, name, alias=MISSING, **kwargs):
        """Register a resource. When several share an alias the last registered one is used.

        Args:
            package (str): Package name ('detrap.data'); '' for a plain file path.
            name (str): Name of the resource ('hello.s').
            alias (str)[MISSING]: Shortcut alias name identifier for the resource.
            **kwargs (dict): Dictionary of keyword arguments to set as attributes to the resource.
        """
        kwargs.setdefault('manager', self)
        rsc = self.RESOURCE_CLASS(package, name, alias=alias, **kwargs)
        self.append(rsc)
        return rsc

    def register_data(self, data, package, name, alias=MISSING, **kwargs):
        """Register a plain data resource; `data` may be a callable producing bytes or text."""
        kwargs.setdefault('manager', self)
        rsc = self.RESOURCE_CLASS(package, name, alias=alias, data=data, **kwargs)
        self.append(rsc)
        return rsc

    def register_directory(self, package, directory='', extensions=None, exclude=None, **kwargs):
        """Register the files of a package, or of a plain directory when `package` is ''.

        Args:
            package (str): Package name; '' to register files from `directory` on disk.
            directory (str)['']: Directory inside the package, or the filesystem directory.
            extensions (list/str)[None]: Extensions to register. If None register all.
            exclude (list/str)[None]: File names to skip.
            **kwargs (dict): Dictionary of keyword arguments to set as attributes to the resource.

        Returns:
            directory (list): List of Resource objects that were registered.
        """
        if isinstance(extensions, str):
            extensions = [extensions]
        if isinstance(exclude, str):
            exclude = [exclude]
        exclude = exclude or []

        if package:
            entries = files(package).joinpath(directory) if directory else files(package)
            names = [(f.name, f.is_dir()) for f in entries.iterdir()]
        else:
            names = [(name, os.path.isdir(os.path.join(directory, name))) for name in os.listdir(directory)]

        folder = []
        for name, is_dir in sorted(names):
            ext = os.path.splitext(name)[-1]
            if is_dir or name in exclude or name.startswith('__') or (extensions is not None and ext not in extensions):
                continue
            if package:
                path = '/'.join((directory, name)) if directory else name
                folder.append(self.register(package, path, **kwargs))
            else:
                folder.append(self.register('', os.path.join(directory, name), **kwargs))
        return folder

    def unregister(self, alias):
        """Remove and return the newest resource matching `alias`.

        Raises:
            ResourceNotAvailable: Nothing matches.
        """
        for i in reversed(range(len(self))):
            if self[i] == alias:
                return self.pop(i)
        raise ResourceNotAvailable('Resource "{}" not found!'.format(alias))

    def has_resource(self, alias):
        return alias in self

    def get_resources(self):
        """Return the registered resources, newest first, one per alias."""
        found = []
        aliases = set()
        for rsc in reversed(self):
            if rsc.alias not in aliases:
                aliases.add(rsc.alias)
                found.append(rsc)
        return found

    def get_resource(self, rsc, fallback=None, default=MISSING):
        """Return the Resource registered under `rsc`, then `fallback`, else `default`.

        Raises:
            ResourceNotAvailable: Neither was registered and no default was given.
        """
        if isinstance(rsc, Resource):
            return rsc
        for alias in (rsc, fallback):
            if alias is None:
                continue
            try:
                return self[alias]
            except ResourceNotAvailable:
                pass
        if default is MISSING:
            raise ResourceNotAvailable('Resource "{}" not found'.format(rsc))
        return default

    def get_binary(self, rsc, fallback=None, default=MISSING):
        rsc = self.get_resource(rsc, fallback, default)
        if isinstance(rsc, Resource):
            return rsc.read_bytes()
        return rsc

    def get_text(self, rsc, fallback=None, default=MISSING, encoding='utf-8', errors='strict'):
        rsc = self.get_resource(rsc, fallback, default)
        if isinstance(rsc, Resource):
            return rsc.read_text(encoding, errors)
        return rsc


RESOURCE_MANAGER = ResourceManager()


def get_global_manager():
    """Return the global ResourceManager."""
    return RESOURCE_MANAGER


def set_global_manager(manager):
    """Set the global ResourceManager."""
    global RESOURCE_MANAGER
    RESOURCE_MANAGER = manager


@contextlib.contextmanager
def temp_manager(manager):
    """Temporarily change the global resource manager using this with context."""
    old = get_global_manager()
    set_global_manager(manager)
    try:
        yield manager
    finally:
        set_global_manager(old)


def register(package, name, alias=MISSING, **kwargs):
    return get_global_manager().register(package, name, alias=alias, **kwargs)


def register_data(data, package, name, alias=MISSING, **kwargs):
    return get_global_manager().register_data(data, package, name, alias=alias, **kwargs)


def register_directory(package, directory='', extensions=None, exclude=None, **kwargs):
    return get_global_manager().register_directory(package, directory, extensions=extensions, exclude=exclude,
                                                   **kwargs)


def unregister(alias):
    return get_global_manager().unregister(alias)


def has_resource(alias):
    return get_global_manager().has_resource(alias)


def get_resources():
    return get_global_manager().get_resources()


def get_resource(rsc, fallback=None, default=MISSING):
    return get_global_manager().get_resource(rsc, fallback=fallback, default=default)


def get_binary(rsc, fallback=None, default=MISSING):
    return get_global_manager().get_binary(rsc, fallback=fallback, default=default)


def get_text(rsc, fallback=None, default=MISSING, encoding='utf-8', errors='strict'):
    return get_global_manager().get_text(rsc, fallback=fallback, default=default, encoding=encoding, errors=errors)


def read_program(arg):
    """Return the bytes of a program given as a file path or a registered alias.

    Raises:
        ResourceNotAvailable: `arg` is neither an existing file nor a registered resource.
    """
    if os.path.isfile(arg):
        with open(arg, 'rb') as f:
            return f.read()
    return get_binary(arg)


BENCH_CALLS = 10


def bench_source(instrument=True, leaf=False, calls=BENCH_CALLS):
    """Return the benchmark program: ``_start`` calls ``work`` `calls` times.

    ``work`` is a non-leaf function calling the leaf ``bump`` unless `leaf` is set, in which case
    ``work`` is itself a leaf and instrumentation adds nothing.
    """
    bump = FunctionSkeleton('bump', leaf=True, body=['    addi a0, a0, 1'])
    if leaf:
        functions = [FunctionSkeleton('work', leaf=True, body=['    addi a0, a0, 1'])]
    else:
        functions = [FunctionSkeleton('work', leaf=False, frame_size=16, body=['    call bump']), bump]
    return build_program(functions, entry_calls=['work'] * calls, instrument=instrument)


def register_bundled(manager=None):
    """Register the bundled data files and the generated benchmark programs."""
    man = manager if manager is not None else get_global_manager()
    man.register_directory(DATA_PACKAGE, extensions=BUNDLED_EXTENSIONS, alias=None)
    man.register_data(lambda: bench_source(False), DATA_PACKAGE, 'bench_baseline.s', alias=None)
    man.register_data(lambda: bench_source(True), DATA_PACKAGE, 'bench_detrap.s', alias=None)
    man.register_data(lambda: bench_source(False, leaf=True), DATA_PACKAGE, 'bench_leaf_baseline.s', alias=None)
    man.register_data(lambda: bench_source(True, leaf=True), DATA_PACKAGE, 'bench_leaf_detrap.s', alias=None)
    return man


register_bundled()
