"""Inclusive prefix scan over affine maps ``x -> scale * x + offset``.

Elements are stored structure-of-arrays: ``scale`` and ``offset`` are
``(K, d)`` arrays, one row per interval.  ``combine(s, t)`` applies ``s``
first, then ``t``.

The parallel scan is the Blelloch up-sweep/down-sweep over a tree padded to
a power of two, followed by one elementwise combine that turns the exclusive
prefixes into inclusive ones.  The tree shape depends only on ``K``, so the
output bits do not depend on how many threads run a level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._accel import NUMBA_ENABLED, njit, prange
from .moments import MomentTrajectory, init_to_eigenbasis, step_coefficients
from .types import GaussianState, PiecewiseControl


@dataclass(frozen=True)
class ScanElement:
    scale: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scale, dtype=np.float64)
        o = np.asarray(self.offset, dtype=np.float64)
        if s.shape != o.shape:
            raise ValueError(f"scale {s.shape} and offset {o.shape} shapes differ")
        object.__setattr__(self, "scale", s)
        object.__setattr__(self, "offset", o)

    def __len__(self) -> int:
        return self.scale.shape[0]

    def __getitem__(self, i) -> "ScanElement":
        return ScanElement(self.scale[i], self.offset[i])

    @staticmethod
    def identity(d: int) -> "ScanElement":
        return ScanElement(np.ones(d), np.zeros(d))

    @staticmethod
    def stack(elems) -> "ScanElement":
        elems = list(elems)
        if not elems:
            raise ValueError("cannot stack an empty element list")
        return ScanElement(
            np.stack([np.atleast_1d(e.scale) for e in elems]),
            np.stack([np.atleast_1d(e.offset) for e in elems]),
        )

    def apply(self, x) -> np.ndarray:
        return self.scale * x + self.offset


def combine(s: ScanElement, t: ScanElement) -> ScanElement:
    if s.scale.shape != t.scale.shape:
        raise ValueError(f"dimension mismatch: {s.scale.shape} vs {t.scale.shape}")
    return ScanElement(t.scale * s.scale, t.scale * s.offset + t.offset)


def build_elements(control: PiecewiseControl) -> tuple[ScanElement, ScanElement]:
    """Mean and variance scan elements, one row per interval, in the eigenbasis."""
    op = control.operator
    dts = control.grid.deltas[:, None]
    decay, gain, vdecay, vgain = step_coefficients(op.spectra, dts, control.diffusion)
    mean_elems = ScanElement(decay, gain * control.offsets_eigen())
    cov_elems = ScanElement(vdecay, vgain)
    return mean_elems, cov_elems


# ---------------------------------------------------------------- kernels


def _levels(K: int) -> int:
    return 0 if K <= 1 else int(np.ceil(np.log2(K)))


def _scan_numpy(scale, offset):
    K, d = scale.shape
    L = _levels(K)
    n = 1 << L
    a = np.ones((n, d))
    b = np.zeros((n, d))
    a[:K], b[:K] = scale, offset
    for lvl in range(L):
        step = 1 << (lvl + 1)
        half = step >> 1
        right = slice(step - 1, n, step)
        left = slice(half - 1, n, step)
        al, bl = a[left], b[left]
        ar = a[right]
        b[right] = ar * bl + b[right]
        a[right] = ar * al
    a[n - 1], b[n - 1] = 1.0, 0.0
    for lvl in range(L - 1, -1, -1):
        step = 1 << (lvl + 1)
        half = step >> 1
        right = slice(step - 1, n, step)
        left = slice(half - 1, n, step)
        al, bl = a[left].copy(), b[left].copy()
        ap, bp = a[right].copy(), b[right].copy()
        a[left], b[left] = ap, bp
        a[right] = al * ap
        b[right] = al * bp + bl
    out_a = scale * a[:K]
    out_b = scale * b[:K] + offset
    return out_a, out_b, 2 * L + 1


@njit(cache=True, parallel=True)
def _scan_numba(scale, offset):  # pragma: no cover - compiled
    K, d = scale.shape
    L = 0
    while (1 << L) < K:
        L += 1
    n = 1 << L
    a = np.ones((n, d))
    b = np.zeros((n, d))
    a[:K] = scale
    b[:K] = offset
    for lvl in range(L):
        step = 1 << (lvl + 1)
        half = step >> 1
        m = n // step
        for j in prange(m):
            r = j * step + step - 1
            l = j * step + half - 1
            for k in range(d):
                ar = a[r, k]
                b[r, k] = ar * b[l, k] + b[r, k]
                a[r, k] = ar * a[l, k]
    for k in range(d):
        a[n - 1, k] = 1.0
        b[n - 1, k] = 0.0
    for lvl in range(L - 1, -1, -1):
        step = 1 << (lvl + 1)
        half = step >> 1
        m = n // step
        for j in prange(m):
            r = j * step + step - 1
            l = j * step + half - 1
            for k in range(d):
                al = a[l, k]
                bl = b[l, k]
                ap = a[r, k]
                bp = b[r, k]
                a[l, k] = ap
                b[l, k] = bp
                a[r, k] = al * ap
                b[r, k] = al * bp + bl
    out_a = np.empty((K, d))
    out_b = np.empty((K, d))
    for i in prange(K):
        for k in range(d):
            out_a[i, k] = scale[i, k] * a[i, k]
            out_b[i, k] = scale[i, k] * b[i, k] + offset[i, k]
    return out_a, out_b, 2 * L + 1


@njit(cache=True)
def _fold_numba(scale, offset):  # pragma: no cover - compiled
    K, d = scale.shape
    out_a = np.empty((K, d))
    out_b = np.empty((K, d))
    for k in range(d):
        out_a[0, k] = scale[0, k]
        out_b[0, k] = offset[0, k]
    for i in range(1, K):
        for k in range(d):
            out_a[i, k] = scale[i, k] * out_a[i - 1, k]
            out_b[i, k] = scale[i, k] * out_b[i - 1, k] + offset[i, k]
    return out_a, out_b


def _fold_numpy(scale, offset):
    K = scale.shape[0]
    out_a = np.empty_like(scale)
    out_b = np.empty_like(offset)
    out_a[0], out_b[0] = scale[0], offset[0]
    for i in range(1, K):
        out_a[i] = scale[i] * out_a[i - 1]
        out_b[i] = scale[i] * out_b[i - 1] + offset[i]
    return out_a, out_b


# ---------------------------------------------------------------- public API


def _as_soa(elems) -> tuple[ScanElement, bool]:
    if isinstance(elems, ScanElement):
        return elems, False
    return ScanElement.stack(elems), True


def _prepare(elems):
    batch, was_list = _as_soa(elems)
    if batch.scale.ndim == 0 or batch.scale.shape[0] == 0:
        raise ValueError("scan input must be a nonempty sequence of elements")
    scale = np.ascontiguousarray(batch.scale.reshape(batch.scale.shape[0], -1))
    offset = np.ascontiguousarray(batch.offset.reshape(scale.shape))
    return scale, offset, batch.scale.shape, was_list


def _finish(out_a, out_b, shape, was_list):
    res = ScanElement(out_a.reshape(shape), out_b.reshape(shape))
    return [res[i] for i in range(len(res))] if was_list else res


def parallel_scan_with_depth(elems, backend: str | None = None):
    """Inclusive scan plus the number of dependent combine levels executed."""
    scale, offset, shape, was_list = _prepare(elems)
    use_numba = NUMBA_ENABLED if backend is None else backend == "numba"
    if use_numba and not NUMBA_ENABLED:
        raise RuntimeError("numba backend requested but numba is disabled")
    kernel = _scan_numba if use_numba else _scan_numpy
    out_a, out_b, depth = kernel(scale, offset)
    return _finish(out_a, out_b, shape, was_list), int(depth)


def parallel_scan(elems, backend: str | None = None):
    """Inclusive prefixes ``out[i] = e_0 (x) ... (x) e_i``.

    Accepts either a list of :class:`ScanElement` (returns a list) or a single
    stacked element with leading axis ``K`` (returns one stacked element).
    """
    return parallel_scan_with_depth(elems, backend)[0]


def sequential_scan(elems, backend: str | None = None):
    """Left fold reference with the same input/output conventions as :func:`parallel_scan`."""
    scale, offset, shape, was_list = _prepare(elems)
    use_numba = NUMBA_ENABLED if backend is None else backend == "numba"
    out_a, out_b = (_fold_numba if use_numba else _fold_numpy)(scale, offset)
    return _finish(out_a, out_b, shape, was_list)


def scan_affine(scale, offset, backend: str | None = None):
    """Array-level entry: inclusive prefix of ``(K, ...)`` scale/offset arrays."""
    res = parallel_scan(ScanElement(scale, offset), backend)
    return res.scale, res.offset


def moments_via_scan(init: GaussianState, control: PiecewiseControl, backend: str | None = None) -> MomentTrajectory:
    """Same contract as :func:`cdssm.moments.propagate_sequential`, computed by two scans."""
    if init.dim != control.dim:
        raise ValueError(f"dimension mismatch: init {init.dim}, control {control.dim}")
    op = control.operator
    m0, v0 = init_to_eigenbasis(init, op)
    K = control.grid.n_intervals
    means = np.empty((K + 1, op.dim))
    variances = np.empty((K + 1, op.dim))
    means[0], variances[0] = m0, v0
    if K > 0:
        mean_elems, cov_elems = build_elements(control)
        pm = parallel_scan(mean_elems, backend)
        pc = parallel_scan(cov_elems, backend)
        means[1:] = pm.scale * m0 + pm.offset
        variances[1:] = pc.scale * v0 + pc.offset
    return MomentTrajectory(control.grid, means, variances, op)
