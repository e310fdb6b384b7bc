"""Optional numba acceleration for the hot kernels.

Every kernel in :mod:`crowdslam.kernels` exists twice: a loop version that is
compiled with ``numba.njit`` and a vectorised numpy version.  The numba path is
used when numba imports and ``CROWDSLAM_NUMBA`` is not set to ``0``.
"""

import os

_FLAG = os.environ.get("CROWDSLAM_NUMBA", "1").strip().lower()
NUMBA_REQUESTED = _FLAG not in ("0", "false", "no", "off")

try:
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    HAVE_NUMBA = False
    _njit = None

USE_NUMBA = NUMBA_REQUESTED and HAVE_NUMBA


def jit(fn):
    """Compile ``fn`` in nopython mode when numba is available."""
    if not HAVE_NUMBA:
        return fn
    return _njit(cache=True, nogil=True)(fn)


def select(numba_impl, numpy_impl):
    return numba_impl if USE_NUMBA else numpy_impl
