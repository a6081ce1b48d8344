"""Numba acceleration shim.

Hot kernels carry two implementations: an explicit-loop version compiled
with numba, and a vectorized pure-numpy fallback. Set BULKSIM_NO_NUMBA=1
to force the numpy path (useful for debugging and on platforms without a
working numba install). Both paths are tested for bit-level agreement.
"""

import os

NUMBA_DISABLED = os.environ.get("BULKSIM_NO_NUMBA", "") == "1"

try:
    if NUMBA_DISABLED:
        raise ImportError
    from numba import njit as _numba_njit

    NUMBA_AVAILABLE = True
except ImportError:
    NUMBA_AVAILABLE = False

USE_NUMBA = NUMBA_AVAILABLE and not NUMBA_DISABLED


def njit(*args, **kwargs):
    """Decorator that is numba.njit when enabled, identity otherwise."""
    if USE_NUMBA:
        return _numba_njit(*args, **kwargs)
    if args and callable(args[0]) and not kwargs:
        return args[0]

    def wrap(func):
        return func

    return wrap
