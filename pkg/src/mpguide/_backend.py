"""Kernel backend selection.

The compiled ``_core`` extension is used when it imports; otherwise the
pure-Python ``_pycore`` module takes over.  Setting ``MPGUIDE_BACKEND=python``
forces the fallback, ``MPGUIDE_BACKEND=compiled`` makes a missing extension an
error.
"""

import importlib
import os

_CHOICE = os.environ.get("MPGUIDE_BACKEND", "auto").lower()


def _load(name):
    if name == "python":
        return importlib.import_module("mpguide._pycore")
    if name == "compiled":
        return importlib.import_module("mpguide._core")
    raise ValueError(f"unknown backend {name!r}")


def get_backend(name=None):
    """Return a kernel module by name ('compiled' or 'python'); None means default."""
    if name is None:
        return core
    return _load(name)


def available_backends():
    names = ["python"]
    try:
        _load("compiled")
    except ImportError:
        pass
    else:
        names.insert(0, "compiled")
    return names


if _CHOICE == "python":
    core = _load("python")
elif _CHOICE == "compiled":
    core = _load("compiled")
else:
    try:
        core = _load("compiled")
    except ImportError:
        core = _load("python")

BACKEND = core.BACKEND
