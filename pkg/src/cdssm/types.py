"""Core value types shared by every module.

All containers are frozen dataclasses over read-only float64 arrays, so they
can be shared between threads without copying.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

ORTHO_TOL = 1e-10
SPECTRUM_EPS = 1e-6


def _frozen(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TimeGrid:
    """Ordered timestamps ``t_0 <= t_1 <= ... <= t_K``.

    ``t_0`` is the time of the initial law; interval ``i`` (1-based) is
    ``[t_{i-1}, t_i)``.
    """

    times: np.ndarray

    def __post_init__(self):
        t = _frozen(np.atleast_1d(self.times))
        if t.ndim != 1 or t.size < 1:
            raise ValueError("TimeGrid needs at least one timestamp")
        if not np.all(np.isfinite(t)):
            raise ValueError("timestamps must be finite")
        if t[0] < 0:
            raise ValueError("timestamps must be nonnegative")
        if np.any(np.diff(t) < 0):
            raise ValueError("timestamps must be nondecreasing")
        object.__setattr__(self, "times", t)

    def __len__(self) -> int:
        return self.times.size

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def n_intervals(self) -> int:
        return self.times.size - 1

    @property
    def deltas(self) -> np.ndarray:
        return np.diff(self.times)

    def is_strict(self) -> bool:
        return bool(np.all(np.diff(self.times) > 0))

    def locate(self, t: float) -> int:
        """Index ``i`` with ``t_i <= t < t_{i+1}``; the last index at ``t = T``."""
        if not (self.times[0] <= t <= self.times[-1]):
            raise ValueError(f"t={t} outside [{self.times[0]}, {self.times[-1]}]")
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        return min(i, self.times.size - 1)


@dataclass(frozen=True)
class ObservationSeq:
    grid: TimeGrid
    values: np.ndarray
    mask: np.ndarray
    obs_noise: np.ndarray | None = None

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim == 1:
            v = v[:, None]
        m = np.array(self.mask, dtype=bool)
        if m.shape != v.shape:
            m = np.broadcast_to(m.reshape(m.shape + (1,) * (v.ndim - m.ndim)), v.shape).copy()
        if v.shape[0] != len(self.grid):
            raise ValueError("one row of values per timestamp required")
        if not np.all(np.isfinite(v[m])):
            raise ValueError("observed values must be finite")
        object.__setattr__(self, "values", _frozen(v))
        object.__setattr__(self, "mask", _frozen(m, bool))
        if self.obs_noise is not None:
            r = _frozen(np.broadcast_to(np.asarray(self.obs_noise, float), (v.shape[1],)))
            if np.any(r <= 0):
                raise ValueError("obs_noise entries must be positive")
            object.__setattr__(self, "obs_noise", r)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def n_observed(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True)
class GaussianState:
    """Mean and covariance; ``eigen=True`` stores only the eigenbasis diagonal."""

    mean: np.ndarray
    cov: np.ndarray
    eigen: bool = False

    def __post_init__(self):
        m = _frozen(np.atleast_1d(self.mean))
        c = _frozen(self.cov)
        if not np.all(np.isfinite(m)):
            raise ValueError("mean must be finite")
        d = m.size
        if self.eigen:
            if c.shape != (d,):
                raise ValueError("eigenbasis covariance must be a d-vector of variances")
            if np.any(c < 0):
                raise ValueError("variances must be nonnegative")
        else:
            if c.shape != (d, d):
                raise ValueError("covariance must be d x d")
            if not np.allclose(c, c.T, atol=1e-10 * max(1.0, np.abs(c).max())):
                raise ValueError("covariance must be symmetric")
            if np.linalg.eigvalsh(0.5 * (c + c.T)).min() < -1e-10 * max(1.0, np.abs(c).max()):
                raise ValueError("covariance must be positive semidefinite")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "cov", c)

    @property
    def dim(self) -> int:
        return self.mean.size

    def full_cov(self) -> np.ndarray:
        return np.diag(self.cov) if self.eigen else np.array(self.cov)


@dataclass(frozen=True)
class SpdOperator:
    """``A_i = E diag(spectra[i]) E^T`` with one orthonormal basis for all intervals."""

    basis: np.ndarray
    spectra: np.ndarray

    def __post_init__(self):
        E = _frozen(self.basis)
        lam = _frozen(np.atleast_2d(self.spectra))
        d = E.shape[0]
        if E.shape != (d, d) or lam.shape[1] != d:
            raise ValueError("basis must be d x d and spectra n x d")
        if np.linalg.norm(E.T @ E - np.eye(d)) > ORTHO_TOL:
            raise ValueError("basis is not orthonormal")
        if not np.all(np.isfinite(lam)) or np.any(lam < 0):
            raise ValueError("spectra must be finite and nonnegative")
        object.__setattr__(self, "basis", E)
        object.__setattr__(self, "spectra", lam)

    @property
    def dim(self) -> int:
        return self.basis.shape[0]

    @property
    def n_intervals(self) -> int:
        return self.spectra.shape[0]

    def matrix(self, i: int) -> np.ndarray:
        E = self.basis
        return (E * self.spectra[i]) @ E.T


@dataclass(frozen=True)
class PiecewiseControl:
    """Per-interval drift ``-A_i x + alpha_i`` with diffusion ``sigma``.

    ``offsets`` are in the standard basis, one row per grid interval.
    """

    grid: TimeGrid
    operator: SpdOperator
    offsets: np.ndarray
    diffusion: float = 1.0

    def __post_init__(self):
        a = _frozen(np.asarray(self.offsets, dtype=np.float64).reshape(-1, self.operator.dim))
        k = self.grid.n_intervals
        if a.shape[0] != k or self.operator.n_intervals != k:
            raise ValueError(
                f"need exactly one (spectrum, offset) per interval: grid has {k}, "
                f"spectra {self.operator.n_intervals}, offsets {a.shape[0]}"
            )
        if not np.all(np.isfinite(a)):
            raise ValueError("offsets must be finite")
        s = float(self.diffusion)
        if not (np.isfinite(s) and s > 0):
            raise ValueError("diffusion must be positive and finite")
        object.__setattr__(self, "offsets", a)
        object.__setattr__(self, "diffusion", s)

    @property
    def dim(self) -> int:
        return self.operator.dim

    def offsets_eigen(self) -> np.ndarray:
        return self.offsets @ self.operator.basis


def to_eigenbasis(op: SpdOperator, v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != op.dim:
        raise ValueError(f"dimension mismatch: operator {op.dim}, vector {v.shape[-1]}")
    return v @ op.basis


def from_eigenbasis(op: SpdOperator, v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != op.dim:
        raise ValueError(f"dimension mismatch: operator {op.dim}, vector {v.shape[-1]}")
    return v @ op.basis.T


def cov_to_eigenbasis(op: SpdOperator, S) -> np.ndarray:
    S = np.asarray(S, dtype=np.float64)
    if S.shape != (op.dim, op.dim):
        raise ValueError(f"dimension mismatch: operator {op.dim}, matrix {S.shape}")
    E = op.basis
    out = E.T @ S @ E
    return 0.5 * (out + out.T)


def cov_from_eigenbasis(op: SpdOperator, S_hat) -> np.ndarray:
    S_hat = np.asarray(S_hat, dtype=np.float64)
    E = op.basis
    out = (E * S_hat) @ E.T if S_hat.ndim == 1 else E @ S_hat @ E.T
    return 0.5 * (out + out.T)


def orthonormal_from_skew(params) -> np.ndarray:
    """Matrix exponential of the skew part of ``params``; exactly orthogonal up to rounding."""
    X = np.asarray(params, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != X.shape[1]:
        raise ValueError("basis parameters must be square")
    return expm(X - X.T)


def make_spd(basis_params, spectrum_params, eps: float = SPECTRUM_EPS) -> SpdOperator:
    """Build an operator from unconstrained parameters.

    ``basis_params`` (d x d) goes through the exponential map of its skew
    part; ``spectrum_params`` (n x d) through ``exp(p) + eps``.
    """
    bp = np.asarray(basis_params, dtype=np.float64)
    sp = np.atleast_2d(np.asarray(spectrum_params, dtype=np.float64))
    if not (np.all(np.isfinite(bp)) and np.all(np.isfinite(sp))):
        raise ValueError("parameters must be finite")
    return SpdOperator(orthonormal_from_skew(bp), np.exp(sp) + eps)
