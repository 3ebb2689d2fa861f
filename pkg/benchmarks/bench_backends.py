"""Numba kernels against their numpy twins.

Times the two hot loops that have compiled versions: the parallel scan
(plus the sequential fold it replaces) and Euler-Maruyama stepping of an
affine SDE.  Each pair of results is checked for agreement before timing.

    python3 benchmarks/bench_backends.py
    python3 benchmarks/bench_backends.py --K 256,65536 --paths 20000 --out bench.csv

Prints CSV with a ``kernel`` and ``backend`` column; ``reference_ns`` is the
sequential fold for scans and blank for stepping.  The first numba call
compiles, so every kernel is warmed up once before the clock starts.
"""

import argparse
import sys
import time

import numpy as np

from cdssm._accel import NUMBA_ENABLED
from cdssm.bench import bench_scan
from cdssm.lg.sde import simulate_affine
from cdssm.rng import RandomStream

HEADER = "kernel,backend,size,d,reference_ns,kernel_ns"


def best_ns(fn, repeats):
    best = None
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        dt = time.perf_counter_ns() - t0
        best = dt if best is None else min(best, dt)
    return best


def scan_rows(K_list, d, repeats, backends):
    rows = []
    for be in backends:
        bench_scan([8], d, [1], RandomStream(0, 6), 1, backend=be)  # warm-up
        for K, _, _, seq_ns, par_ns, _ in bench_scan(K_list, d, [1], RandomStream(0, 6), repeats, backend=be):
            rows.append(("scan", be, K, d, seq_ns, par_ns))
    return rows


def em_rows(n_paths, n_steps, d, repeats, backends):
    g = np.random.default_rng(0)
    gains = np.tile(np.eye(d) * 0.5, (n_steps, 1, 1))
    offsets = g.normal(size=(n_steps, d))
    sizes = np.full(n_steps, 1e-3)
    record = np.array([0, n_steps // 2, n_steps])
    x0 = g.normal(size=(n_paths, d))

    def run(be):
        return simulate_affine(gains, offsets, sizes, record, 1.0, x0, RandomStream(1), backend=be)

    outs = {be: run(be) for be in backends}
    if len(outs) == 2 and not np.allclose(outs["numba"], outs["numpy"], rtol=1e-12, atol=1e-12):
        raise AssertionError("numba and numpy Euler-Maruyama paths disagree")
    return [("euler-maruyama", be, n_paths * n_steps, d, "", best_ns(lambda: run(be), repeats)) for be in backends]


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--K", default="16,1024,65536", help="scan lengths")
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--paths", type=int, default=4096)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--out", default=None)
    args = p.parse_args(argv)

    backends = ["numba", "numpy"] if NUMBA_ENABLED else ["numpy"]
    if not NUMBA_ENABLED:
        print("numba unavailable or disabled; timing numpy only", file=sys.stderr)
    K_list = [int(k) for k in args.K.split(",")]
    rows = scan_rows(K_list, args.d, args.repeats, backends)
    rows += em_rows(args.paths, args.steps, args.d, args.repeats, backends)

    text = "\n".join([HEADER] + [",".join(str(v) for v in r) for r in rows]) + "\n"
    sys.stdout.write(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)


if __name__ == "__main__":
    main()
