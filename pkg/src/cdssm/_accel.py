"""Backend switch for the compiled kernels.

Hot loops (scan levels, Euler-Maruyama stepping) ship as numba kernels with a
pure-numpy twin.  Set ``CDSSM_DISABLE_NUMBA=1`` to force the numpy path, e.g.
for debugging or on platforms without an LLVM toolchain.
"""

from __future__ import annotations

import os

_DISABLED = os.environ.get("CDSSM_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

# The bundled TBB is often too old for numba; OpenMP avoids the noisy fallback.
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

try:
    if _DISABLED:
        raise ImportError("numba disabled by CDSSM_DISABLE_NUMBA")
    import numba
    from numba import njit, prange

    NUMBA_ENABLED = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    NUMBA_ENABLED = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def wrap(fn):
            return fn

        return wrap

    prange = range


def backend() -> str:
    return "numba" if NUMBA_ENABLED else "numpy"


def set_workers(n: int) -> int:
    """Set the kernel thread count; returns the count actually in effect."""
    if n < 1:
        raise ValueError("workers must be >= 1")
    if not NUMBA_ENABLED:
        return n
    n_eff = min(n, numba.config.NUMBA_NUM_THREADS)
    numba.set_num_threads(n_eff)
    return n_eff
