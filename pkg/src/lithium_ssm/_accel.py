"""Numba switch.

Kernels are compiled with numba unless ``LITHIUM_SSM_DISABLE_NUMBA`` is set
to a truthy value (or numba is missing), in which case the pure-numpy
implementations are used instead. The flag is read once, at import.
"""

import os

_FALSY = {"", "0", "false", "no", "off"}


def _env_disabled() -> bool:
    return os.environ.get("LITHIUM_SSM_DISABLE_NUMBA", "").strip().lower() not in _FALSY


try:
    import numba as _numba
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not _env_disabled()


def njit(fn):
    """``numba.njit(cache=True)`` when numba is available, else identity.

    Compiling is lazy, so defining a jitted twin costs nothing when the
    numpy path is selected.
    """
    if not HAVE_NUMBA:
        return fn
    return _numba.njit(cache=True)(fn)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
