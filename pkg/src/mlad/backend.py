"""Select the compiled kernels when importable, else the numpy fallback.

Set ``MLAD_PURE_PYTHON=1`` before import to force the fallback.
"""
import os

from . import _pykernels

try:
    if os.environ.get("MLAD_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python backend forced")
    from . import _kernels as _active
    NAME = "cython"
except ImportError:
    _active = _pykernels
    NAME = "python"


def get(name=None):
    """Return the kernel module by name (``"cython"``, ``"python"``) or the active one."""
    if name is None:
        return _active
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _kernels
        return _kernels
    raise ValueError(f"unknown backend {name!r}")


def available():
    names = ["python"]
    try:
        from . import _kernels  # noqa: F401
        names.insert(0, "cython")
    except ImportError:
        pass
    return names
