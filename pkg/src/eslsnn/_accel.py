"""Numba switch.

Set ``ESLSNN_NUMBA=0`` to force the pure-numpy kernels (useful for debugging
or on platforms without an LLVM toolchain).
"""
import os

_FALSE = {"0", "false", "no", "off"}

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

USE_NUMBA = numba is not None and os.environ.get("ESLSNN_NUMBA", "1").strip().lower() not in _FALSE


def njit(*args, **kwargs):
    """``numba.njit`` when numba is importable, identity otherwise.

    The decorated function is always compiled lazily so importing the package
    stays cheap; whether the compiled version is *dispatched to* is decided
    by :data:`USE_NUMBA` in the callers.
    """
    if numba is None:  # pragma: no cover
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", True)
    return numba.njit(*args, **kwargs)


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
