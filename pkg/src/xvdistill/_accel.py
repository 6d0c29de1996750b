"""Numba switch.

Set ``XVDISTILL_NUMBA=0`` to route every kernel through the pure-numpy path.
The compiled variants stay importable either way so they can be benchmarked
and cross-checked against each other.
"""

import os

try:
    import numba

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    NUMBA_AVAILABLE = False

_flag = os.environ.get("XVDISTILL_NUMBA", "1").strip().lower()
USE_NUMBA = NUMBA_AVAILABLE and _flag not in ("0", "false", "off", "no")


def njit(fn):
    if not NUMBA_AVAILABLE:  # pragma: no cover
        return fn
    return numba.njit(cache=True, nogil=True)(fn)
