"""Numba toggle.

Hot kernels are written once in numba-compatible numpy and compiled with
``numba.njit`` unless ``NCSFSP_DISABLE_NUMBA=1`` is set (or numba is not
importable), in which case the very same functions run as plain Python.
"""

from __future__ import annotations

import os

_DISABLED = os.environ.get("NCSFSP_DISABLE_NUMBA", "0").strip().lower() in {"1", "true", "yes"}

try:
    if _DISABLED:
        raise ImportError("numba disabled by NCSFSP_DISABLE_NUMBA")
    # the system TBB is often too old for numba and it warns on every pool start
    os.environ.setdefault("NUMBA_THREADING_LAYER_PRIORITY", "omp workqueue tbb")
    import numba

    HAS_NUMBA = True
except ImportError:
    numba = None
    HAS_NUMBA = False


def jit(fn=None, *, parallel=False):
    """``numba.njit(cache=True)`` when available, identity otherwise."""

    def wrap(f):
        if HAS_NUMBA:
            return numba.njit(cache=True, parallel=parallel)(f)
        return f

    if fn is None:
        return wrap
    return wrap(fn)


if HAS_NUMBA:
    prange = numba.prange
else:
    prange = range


def set_threads(n: int | None) -> None:
    if n and HAS_NUMBA:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


def backend() -> str:
    return "numba" if HAS_NUMBA else "numpy"
