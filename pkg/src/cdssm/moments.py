"""Closed-form Gaussian marginals of piecewise affine-linear SDEs.

Within interval ``i`` the controlled state obeys
``dX = (-A_i X + alpha_i) dt + sigma dW`` with ``A_i = E diag(lam_i) E^T``.
In the rotated frame ``X_hat = E^T X`` every coordinate is an independent
Ornstein-Uhlenbeck process, so one step is a pair of scalar affine maps per
coordinate:

    m'   = exp(-lam dt) m   + dt * phi1(lam dt) * alpha_hat
    var' = exp(-2 lam dt) var + sigma^2 dt * phi1(2 lam dt)

with ``phi1(x) = (1 - exp(-x)) / x`` extended continuously by ``phi1(0) = 1``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .rng import RandomStream
from .types import (
    GaussianState,
    PiecewiseControl,
    SpdOperator,
    TimeGrid,
    cov_to_eigenbasis,
    to_eigenbasis,
)

log = logging.getLogger(__name__)

SERIES_CUTOFF = 1e-4


def phi1(x):
    """``(1 - exp(-x)) / x`` for ``x >= 0``; a 3-term series below the cutoff."""
    x = np.asarray(x, dtype=np.float64)
    small = x < SERIES_CUTOFF
    safe = np.where(small, 1.0, x)
    exact = -np.expm1(-safe) / safe
    series = 1.0 - x / 2.0 + x * x / 6.0
    return np.where(small, series, exact)


def step_coefficients(lam, dt, sigma: float):
    """Return ``(decay, gain, var_decay, var_gain)`` for one interval.

    ``m' = decay*m + gain*alpha_hat`` and ``var' = var_decay*var + var_gain``.
    Broadcasts over ``lam`` and ``dt``.
    """
    lam = np.asarray(lam, dtype=np.float64)
    dt = np.asarray(dt, dtype=np.float64)
    x = lam * dt
    decay = np.exp(-x)
    gain = dt * phi1(x)
    var_decay = np.exp(-2.0 * x)
    var_gain = sigma * sigma * dt * phi1(2.0 * x)
    return decay, gain, var_decay, var_gain


def _check_step_inputs(lam, alpha_hat, dt, sigma, d):
    if not np.isfinite(dt) or dt < 0:
        raise ValueError(f"interval length must be finite and >= 0, got {dt}")
    if not (np.isfinite(sigma) and sigma >= 0):
        raise ValueError("sigma must be finite and >= 0")
    if lam.shape != (d,) or alpha_hat.shape != (d,):
        raise ValueError("dimension mismatch between state, spectrum and offset")
    if not (np.all(np.isfinite(lam)) and np.all(np.isfinite(alpha_hat))):
        raise ValueError("spectrum and offset must be finite")
    if np.any(lam < 0):
        raise ValueError("spectrum entries must be >= 0")


def local_step(state: GaussianState, lam, alpha_hat, dt: float, sigma: float = 1.0) -> GaussianState:
    """Advance an eigenbasis state by ``dt`` under constant ``(lam, alpha_hat)``."""
    if not state.eigen:
        raise ValueError("local_step expects an eigenbasis (diagonal) state")
    lam = np.asarray(lam, dtype=np.float64).reshape(-1)
    alpha_hat = np.asarray(alpha_hat, dtype=np.float64).reshape(-1)
    dt = float(dt)
    _check_step_inputs(lam, alpha_hat, dt, float(sigma), state.dim)
    if dt == 0.0:
        return state
    decay, gain, vdecay, vgain = step_coefficients(lam, dt, float(sigma))
    return GaussianState(decay * state.mean + gain * alpha_hat, vdecay * state.cov + vgain, eigen=True)


def init_to_eigenbasis(init: GaussianState, op: SpdOperator) -> tuple[np.ndarray, np.ndarray]:
    """Rotate an initial law into the eigenbasis, keeping only the diagonal."""
    if init.dim != op.dim:
        raise ValueError(f"dimension mismatch: init {init.dim}, operator {op.dim}")
    m = to_eigenbasis(op, init.mean)
    if init.eigen:
        return m, np.array(init.cov)
    S = cov_to_eigenbasis(op, init.cov)
    off = S - np.diag(np.diag(S))
    scale = max(1.0, float(np.abs(S).max()))
    if np.abs(off).max(initial=0.0) > 1e-12 * scale:
        log.warning(
            "initial covariance is not diagonal in the operator basis; "
            "dropping off-diagonal mass (max |entry| %.3g)",
            float(np.abs(off).max()),
        )
    return m, np.clip(np.diag(S).copy(), 0.0, None)


@dataclass(frozen=True)
class MomentTrajectory:
    """Eigenbasis means and variances at every grid timestamp.

    ``means`` and ``variances`` have shape ``(len(grid), d)``.
    """

    grid: TimeGrid
    means: np.ndarray
    variances: np.ndarray
    operator: SpdOperator

    def __post_init__(self):
        for name in ("means", "variances"):
            a = np.array(getattr(self, name), dtype=np.float64)
            if a.shape != (len(self.grid), self.operator.dim):
                raise ValueError(f"{name} must have one row per timestamp")
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if np.any(self.variances < 0):
            raise ValueError("variances must be >= 0")

    @property
    def states(self) -> list[GaussianState]:
        return [GaussianState(m, v, eigen=True) for m, v in zip(self.means, self.variances)]

    def means_standard(self) -> np.ndarray:
        return self.means @ self.operator.basis.T

    def cov_standard(self, i: int) -> np.ndarray:
        E = self.operator.basis
        return (E * self.variances[i]) @ E.T


def _validate_control(init: GaussianState, control: PiecewiseControl):
    if init.dim != control.dim:
        raise ValueError(f"dimension mismatch: init {init.dim}, control {control.dim}")


def propagate_sequential(init: GaussianState, control: PiecewiseControl) -> MomentTrajectory:
    """Interval-by-interval recurrence; the reference the scan is checked against."""
    _validate_control(init, control)
    op = control.operator
    m, v = init_to_eigenbasis(init, op)
    a_hat = control.offsets_eigen()
    dts = control.grid.deltas
    K = dts.size
    means = np.empty((K + 1, op.dim))
    variances = np.empty((K + 1, op.dim))
    means[0], variances[0] = m, v
    for i in range(K):
        decay, gain, vdecay, vgain = step_coefficients(op.spectra[i], dts[i], control.diffusion)
        m = decay * m + gain * a_hat[i]
        v = vdecay * v + vgain
        means[i + 1], variances[i + 1] = m, v
    return MomentTrajectory(control.grid, means, variances, op)


def marginal_at(traj: MomentTrajectory, control: PiecewiseControl, t: float) -> GaussianState:
    """Eigenbasis marginal at any ``t`` in ``[t_0, T]`` using the left state's interval."""
    grid = traj.grid
    i = grid.locate(float(t))
    dt = float(t) - float(grid.times[i])
    state = GaussianState(traj.means[i], traj.variances[i], eigen=True)
    if dt == 0.0 or i >= grid.n_intervals:
        return state
    a_hat = control.offsets_eigen()[i]
    return local_step(state, control.operator.spectra[i], a_hat, dt, control.diffusion)


def sample_marginals(traj: MomentTrajectory, rng: RandomStream, n: int) -> np.ndarray:
    """``n`` independent draws per timestamp, returned in the standard basis, shape ``(n, k, d)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    xi = rng.normal((n,) + traj.means.shape)
    x_hat = traj.means + np.sqrt(traj.variances) * xi
    return x_hat @ traj.operator.basis.T
