"""Euler-Maruyama simulation.

Three entry points, from most to least general:

* :func:`simulate_sde` steps any vectorized drift callable.
* :func:`simulate_affine` steps drifts of the form ``-K_s x + k_s`` whose
  coefficients are tabulated per step; the stepping loop is a numba kernel.
* :func:`sample_em_chain` draws the Euler-Maruyama chain of a piecewise
  control *exactly* at the grid times, without stepping.  Within an interval
  the chain is a scalar AR(1) recursion per eigen-coordinate, so its N-step
  law is Gaussian with closed-form moments.

Noise always comes from numpy generators addressed by ``RandomStream``
children (one child per block of paths), so paths do not depend on the
backend or on the number of threads.
"""

from __future__ import annotations

import math

import numpy as np

from .._accel import NUMBA_ENABLED, njit, prange
from ..moments import init_to_eigenbasis
from ..rng import RandomStream
from ..types import GaussianState, PiecewiseControl

PATH_BLOCK = 4096
STEP_BLOCK = 512


class Diverged(FloatingPointError):
    pass


def _substeps(times, dt: float):
    if not (np.isfinite(dt) and dt > 0):
        raise ValueError("dt must be positive and finite")
    deltas = np.diff(np.asarray(times, dtype=np.float64))
    if np.any(deltas < 0):
        raise ValueError("record times must be nondecreasing")
    counts = np.where(deltas > 0, np.ceil(deltas / dt - 1e-12).astype(np.int64), 0)
    counts = np.maximum(counts, (deltas > 0).astype(np.int64))
    return deltas, counts


def step_schedule(times, dt: float):
    """Left endpoints and sizes of the EM steps, and the step index reached at each record time."""
    times = np.asarray(times, dtype=np.float64)
    deltas, counts = _substeps(times, dt)
    starts, sizes = [], []
    for i, (delta, n) in enumerate(zip(deltas, counts)):
        if n == 0:
            continue
        h = delta / n
        starts.append(times[i] + h * np.arange(n))
        sizes.append(np.full(n, h))
    starts = np.concatenate(starts) if starts else np.zeros(0)
    sizes = np.concatenate(sizes) if sizes else np.zeros(0)
    record = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return starts, sizes, record


def simulate_sde(drift, sigma: float, init_samples, times, dt: float, rng: RandomStream) -> np.ndarray:
    """Generic Euler-Maruyama over ``times``; returns states at every time, shape ``(n, len(times), d)``.

    ``drift(t, X)`` must accept an ``(n, d)`` array.
    """
    x = np.array(init_samples, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("init_samples must be (n, d)")
    starts, sizes, record = step_schedule(times, dt)
    out = np.empty((x.shape[0], len(times), x.shape[1]))
    out[:, 0] = x
    gen = rng.generator
    r = 1
    for s in range(starts.size):
        h = sizes[s]
        x = x + drift(starts[s], x) * h + (sigma * math.sqrt(h)) * gen.standard_normal(x.shape)
        while r < len(times) and record[r] == s + 1:
            if not np.all(np.isfinite(x)):
                raise Diverged(f"non-finite state at t={times[r]}")
            out[:, r] = x
            r += 1
    while r < len(times):
        out[:, r] = x
        r += 1
    return out


@njit(cache=True, parallel=True)
def _affine_block_numba(x, gains, offsets, sizes, noise_scale, xi, cgains, coffsets, cost):  # pragma: no cover
    n, d = x.shape
    S = sizes.shape[0]
    track = cost.shape[0] > 0
    for p in prange(n):
        cur = np.empty(d)
        nxt = np.empty(d)
        for k in range(d):
            cur[k] = x[p, k]
        acc_cost = 0.0
        for s in range(S):
            h = sizes[s]
            if track:
                sq = 0.0
                for a in range(d):
                    u = coffsets[s, a]
                    for b in range(d):
                        u -= cgains[s, a, b] * cur[b]
                    sq += u * u
                acc_cost += 0.5 * h * sq
            for a in range(d):
                acc = offsets[s, a]
                for b in range(d):
                    acc -= gains[s, a, b] * cur[b]
                nxt[a] = cur[a] + acc * h + noise_scale[s] * xi[p, s, a]
            for k in range(d):
                cur[k] = nxt[k]
        for k in range(d):
            x[p, k] = cur[k]
        if track:
            cost[p] += acc_cost


def _affine_block_numpy(x, gains, offsets, sizes, noise_scale, xi, cgains, coffsets, cost):
    track = cost.shape[0] > 0
    for s in range(sizes.shape[0]):
        if track:
            u = coffsets[s] - x @ cgains[s].T
            cost += 0.5 * sizes[s] * (u * u).sum(axis=1)
        drift = offsets[s] - x @ gains[s].T
        x += drift * sizes[s] + noise_scale[s] * xi[:, s]


def simulate_affine(
    gains,
    offsets,
    sizes,
    record,
    sigma: float,
    init_samples,
    rng: RandomStream,
    backend: str | None = None,
    control=None,
):
    """Euler-Maruyama for ``dX = (-K_s X + k_s) dt + sigma dW`` with per-step tabulated coefficients.

    ``record[r]`` is the number of steps taken before output slot ``r``.
    Returns ``(n, len(record), d)`` states.  If ``control = (C_s, c_s)`` is
    given, also returns the left-rectangle quadrature of
    ``int |(-C_s X + c_s) / sigma|^2 / 2 dt`` per path.
    """
    gains = np.ascontiguousarray(gains, dtype=np.float64)
    offsets = np.ascontiguousarray(offsets, dtype=np.float64)
    sizes = np.ascontiguousarray(sizes, dtype=np.float64)
    record = np.asarray(record, dtype=np.int64)
    x0 = np.array(init_samples, dtype=np.float64)
    n, d = x0.shape
    use_numba = NUMBA_ENABLED if backend is None else backend == "numba"
    kernel = _affine_block_numba if use_numba else _affine_block_numpy
    noise_scale = sigma * np.sqrt(sizes)
    if control is not None:
        cg = np.ascontiguousarray(control[0], dtype=np.float64) / sigma
        co = np.ascontiguousarray(control[1], dtype=np.float64) / sigma
        cost = np.zeros(n)
    else:
        cg = np.zeros((0, d, d))
        co = np.zeros((0, d))
        cost = np.zeros(0)
    out = np.empty((n, record.size, d))
    for blk, lo in enumerate(range(0, n, PATH_BLOCK)):
        hi = min(n, lo + PATH_BLOCK)
        x = np.ascontiguousarray(x0[lo:hi])
        c_blk = np.zeros(hi - lo if control is not None else 0)
        gen = rng.child(blk).generator
        out[lo:hi, 0] = x
        done = 0
        for r in range(1, record.size):
            target = int(record[r])
            while done < target:
                stop = min(target, done + STEP_BLOCK)
                xi = gen.standard_normal((hi - lo, stop - done, d))
                sl = slice(done, stop)
                kernel(x, gains[sl], offsets[sl], sizes[sl], noise_scale[sl], xi,
                       cg[sl] if control is not None else cg, co[sl] if control is not None else co, c_blk)
                done = stop
            if not np.all(np.isfinite(x)):
                raise Diverged(f"non-finite state before record slot {r}")
            out[lo:hi, r] = x
        if control is not None:
            cost[lo:hi] = c_blk
    return (out, cost) if control is not None else out


def sample_em_chain(control: PiecewiseControl, init: GaussianState, dt: float, n: int, rng: RandomStream) -> np.ndarray:
    """Exact draws of the Euler-Maruyama chain with step ``<= dt`` at the grid times.

    Interval ``i`` of length ``D`` is split into ``N = ceil(D/dt)`` steps of
    size ``h``.  Per eigen-coordinate with ``a = 1 - lam h``:

        x_N = a^N x_0 + alpha h (1 - a^N)/(1 - a) + sigma sqrt(h) sum_j a^(N-1-j) xi_j

    whose noise term has variance ``sigma^2 h (1 - a^(2N)) / (1 - a^2)``.
    Returns standard-basis samples, shape ``(n, k+1, d)``.
    """
    op = control.operator
    E = op.basis
    deltas, counts = _substeps(control.grid.times, dt)
    gen = rng.generator
    m0, _ = init_to_eigenbasis(init, op)
    if init.eigen:
        x = m0 + np.sqrt(init.cov) * gen.standard_normal((n, op.dim))
    else:
        w, V = np.linalg.eigh(0.5 * (init.cov + init.cov.T))
        root = V * np.sqrt(np.clip(w, 0.0, None))
        x = (init.mean + gen.standard_normal((n, op.dim)) @ root.T) @ E
    a_hat = control.offsets_eigen()
    s2 = control.diffusion**2
    out = np.empty((n, deltas.size + 1, op.dim))
    out[:, 0] = x
    for i, (delta, N) in enumerate(zip(deltas, counts)):
        if N == 0:
            out[:, i + 1] = x
            continue
        h = delta / N
        lam = op.spectra[i]
        z = lam * h
        if np.any(z >= 1.0):
            raise ValueError("step too coarse: lam * h >= 1 makes the chain non-contracting")
        log_a = np.log1p(-z)
        aN = np.exp(N * log_a)
        # (1 - a^N) / (1 - a), continuous at lam = 0
        geo = np.where(z > 0, -np.expm1(N * log_a) / np.where(z > 0, z, 1.0), float(N))
        geo2 = np.where(z > 0, -np.expm1(2.0 * N * log_a) / np.where(z > 0, z * (2.0 - z), 1.0), float(N))
        mean = aN * x + a_hat[i] * h * geo
        std = np.sqrt(s2 * h * geo2)
        x = mean + std * gen.standard_normal((n, op.dim))
        out[:, i + 1] = x
    return out @ E.T


def bridge_schedule(h, times, dt: float):
    """Per-step drift coefficients of the conditioned process for :func:`simulate_affine`.

    Returns ``(gains, offsets, sizes, record, control)`` where the drift at
    step ``s`` is ``-(A_i + sigma^2 P(t_s)) x + beta_i + sigma^2 q(t_s)`` and
    ``control = (sigma^2 P(t_s), sigma^2 q(t_s))`` is the added feedback part.
    """
    ssm = h.ssm
    starts, sizes, record = step_schedule(times, dt)
    s2 = ssm.diffusion**2
    d = ssm.dim
    gains = np.empty((starts.size, d, d))
    offsets = np.empty((starts.size, d))
    cg = np.empty((starts.size, d, d))
    co = np.empty((starts.size, d))
    mats = [ssm.operator.matrix(i) for i in range(ssm.n_intervals)]
    for s, t in enumerate(starts):
        i = ssm.interval_of(float(t))
        P, q, _ = h.coefficients(float(t))
        cg[s], co[s] = s2 * P, s2 * q
        gains[s] = mats[i] + cg[s]
        offsets[s] = ssm.offsets[i] + co[s]
    return gains, offsets, sizes, record, (cg, co)
