"""Timing of the parallel scan against the sequential fold."""

from __future__ import annotations

import math
import time

import numpy as np

from ._accel import backend as active_backend
from ._accel import set_workers
from .pscan import parallel_scan_with_depth, sequential_scan, ScanElement
from .rng import RandomStream

BENCH_HEADER = ("K", "d", "workers", "sequential_ns", "parallel_ns", "combine_depth")


def depth_bound(K: int) -> int:
    return 2 * math.ceil(math.log2(K)) + 2 if K > 1 else 2


def _best_ns(fn, repeats: int) -> int:
    best = math.inf
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        best = min(best, time.perf_counter_ns() - t0)
    return int(best)


def bench_scan(K_list, d: int, workers_list, rng: RandomStream, repeats: int = 5, backend: str | None = None):
    """One row per ``(K, workers)``; checks scan/fold agreement before timing.

    ``backend`` picks the kernel family (default: whichever is active).
    """
    rows = []
    be = backend or active_backend()
    for K in K_list:
        if K < 1:
            raise ValueError("K must be >= 1")
        g = rng.child(K)
        elems = ScanElement(g.uniform(0.5, 1.0, (K, d)), g.normal((K, d)))
        for w in workers_list:
            set_workers(w)
            (res, depth) = parallel_scan_with_depth(elems, be)
            ref = sequential_scan(elems, be)
            scale = np.maximum(np.abs(ref.offset), 1.0)
            if not np.all(np.abs(res.offset - ref.offset) <= 1e-9 * scale):
                raise AssertionError(f"scan and fold disagree at K={K}")
            if depth > depth_bound(K):
                raise AssertionError(f"combine depth {depth} exceeds bound at K={K}")
            seq_ns = _best_ns(lambda: sequential_scan(elems, be), repeats)
            par_ns = _best_ns(lambda: parallel_scan_with_depth(elems, be), repeats)
            rows.append((K, d, w, seq_ns, par_ns, depth))
    return rows


def format_csv(rows) -> str:
    lines = [",".join(BENCH_HEADER)]
    lines += [",".join(str(v) for v in r) for r in rows]
    return "\n".join(lines) + "\n"
