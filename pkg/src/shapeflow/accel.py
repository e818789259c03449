"""Numba acceleration switch.

Hot geometry kernels (FPS, trilinear sampling, grid ray marching, mesh
raycasting) have two implementations: a numba @njit version and a pure-numpy
fallback. Set SHAPEFLOW_PURE_NUMPY=1 to force the fallback path; it is also
used automatically when numba is not importable. `shapeflow bench-kernels`
times both paths.
"""

import os

PURE_NUMPY = os.environ.get("SHAPEFLOW_PURE_NUMPY", "0") not in ("", "0")

try:
    from numba import njit, prange  # noqa: F401

    HAS_NUMBA = True
except ImportError:  # pragma: no cover
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap

    prange = range

USE_NUMBA = HAS_NUMBA and not PURE_NUMPY


def set_num_threads(n):
    """Pin numba's thread count (BLAS threads are set via env at startup)."""
    if HAS_NUMBA and n:
        import numba

        numba.set_num_threads(max(1, int(n)))
