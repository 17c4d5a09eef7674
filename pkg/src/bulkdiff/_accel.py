"""Backend switch for the hot kernels.

Set ``BULKDIFF_NUMBA=0`` to force the pure-numpy path. The choice is read at
import time but can be changed later with :func:`set_backend`, which the tests
and the benchmark use to compare both implementations.
"""
import os
from contextlib import contextmanager

try:
    import numba  # noqa: F401
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

_FALSY = ("0", "false", "no", "off")
_state = {"numba": HAVE_NUMBA and os.environ.get("BULKDIFF_NUMBA", "1").lower() not in _FALSY}


def njit(*args, **kwargs):
    """numba.njit when available, identity decorator otherwise."""
    if HAVE_NUMBA:
        from numba import njit as _njit
        kwargs.setdefault("cache", True)
        return _njit(*args, **kwargs)
    if args and callable(args[0]):
        return args[0]
    return lambda f: f


def use_numba():
    return _state["numba"]


def backend():
    return "numba" if _state["numba"] else "numpy"


def set_backend(name):
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    _state["numba"] = name == "numba"


@contextmanager
def backend_as(name):
    old = backend()
    set_backend(name)
    try:
        yield
    finally:
        set_backend(old)
