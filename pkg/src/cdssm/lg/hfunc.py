"""Gaussian-form look-ahead function ``h(t, x) = exp(-x^T P x / 2 + q^T x + c)``.

``h(t, x)`` is the conditional expectation, under the prior, of the product of
all *normalized* likelihood factors at observation times ``>= t`` (on the
right-open interval convention).  A factor is normalized by the one-step
predictive likelihood of its observation, so the product over the whole
sequence integrates to one against the prior path law.

It is computed by a backward pass: each potential multiplies in a quadratic
form, and each interval is crossed with the exact Gaussian transition kernel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..types import GaussianState, ObservationSeq
from .kalman import FilterResult, kalman_filter
from .model import LinearGaussianSSM

PSD_TOL = 1e-9


def _sym(P):
    return 0.5 * (P + P.T)


def pull_back(P, q, c, F, u, Q):
    """Coefficients of ``x -> E[h(F x + u + eps)]``, ``eps ~ N(0, Q)``, for quadratic-form ``h``."""
    d = P.shape[0]
    I = np.eye(d)
    G = np.linalg.solve(I + P @ Q, I)
    GP = _sym(G @ P)
    Gq = G @ q
    P_new = _sym(F.T @ GP @ F)
    q_new = F.T @ (Gq - GP @ u)
    sign, logdet = np.linalg.slogdet(I + Q @ P)
    if sign <= 0:
        raise FloatingPointError("I + QP lost positive determinant")
    QGq = np.linalg.solve(I + Q @ P, Q @ q)
    c_new = c + 0.5 * q @ QGq + Gq @ u - 0.5 * u @ GP @ u - 0.5 * logdet
    return P_new, q_new, float(c_new)


def potential_form(y, mask_row, emission, log_norm: float):
    """Quadratic-form coefficients of ``N(y_o; H_o x, R_o) / exp(log_norm)``."""
    d = emission.state_dim
    idx = np.flatnonzero(mask_row)
    if idx.size == 0:
        return np.zeros((d, d)), np.zeros(d), 0.0
    H = emission.matrix[idx]
    R = emission.noise[idx]
    yo = np.asarray(y, dtype=np.float64)[idx]
    P = _sym((H.T / R) @ H)
    q = H.T @ (yo / R)
    c = -0.5 * (yo * yo / R).sum() - 0.5 * np.log(2.0 * np.pi * R).sum() - log_norm
    return P, q, float(c)


def _check_psd(P, where: str):
    w = np.linalg.eigvalsh(P)
    if w.min() < -PSD_TOL * max(1.0, abs(w).max()):
        raise FloatingPointError(f"look-ahead precision lost positive semidefiniteness at {where}")


@dataclass(frozen=True)
class HQuadratic:
    """Backward-pass result for one model and observation sequence.

    ``P_end[i], q_end[i], c_end[i]`` describe ``h`` at ``t_i`` approached from
    the left, i.e. including the potential at ``t_i``.  Index 0 holds the
    form that multiplies the initial law (potential at ``t_0`` included).
    """

    ssm: LinearGaussianSSM
    P_end: np.ndarray
    q_end: np.ndarray
    c_end: np.ndarray
    log_normalizers: np.ndarray

    def coefficients(self, t: float, side: str = "right"):
        """``(P(t), q(t), c(t))``.

        ``side="right"`` uses right-open intervals, so at an observation time the
        potential there is already spent; ``side="left"`` takes the left limit.
        At the horizon both give the last potential.
        """
        grid = self.ssm.grid
        t = float(t)
        times = grid.times
        if not (times[0] <= t <= times[-1]):
            raise ValueError(f"t={t} outside [{times[0]}, {times[-1]}]")
        if side not in ("right", "left"):
            raise ValueError("side must be 'right' or 'left'")
        K = grid.n_intervals
        if K == 0:
            return self.P_end[0], self.q_end[0], float(self.c_end[0])
        j = int(np.searchsorted(times, t, side="left")) if side == "left" else 0
        if j == 0:
            j = int(np.searchsorted(times, t, side="right"))
        if j > K:
            return self.P_end[K], self.q_end[K], float(self.c_end[K])
        j = max(j, 1)
        tau = float(times[j]) - t
        if tau == 0.0:
            return self.P_end[j], self.q_end[j], float(self.c_end[j])
        F, u, Q = self.ssm.transition(j - 1, tau)
        return pull_back(self.P_end[j], self.q_end[j], self.c_end[j], F, u, Q)

    def log_h(self, t: float, x, side: str = "right") -> np.ndarray:
        P, q, c = self.coefficients(t, side)
        x = np.asarray(x, dtype=np.float64)
        return -0.5 * np.einsum("...i,ij,...j->...", x, P, x) + x @ q + c

    def h(self, t: float, x, side: str = "right") -> np.ndarray:
        return np.exp(self.log_h(t, x, side))

    def grad_log_h(self, t: float, x, side: str = "right") -> np.ndarray:
        P, q, _ = self.coefficients(t, side)
        return -np.asarray(x, dtype=np.float64) @ P + q

    def conditioned_init(self) -> GaussianState:
        """The initial law reweighted by the look-ahead form at ``t_0``."""
        init = self.ssm.init
        S0 = np.asarray(init.cov)
        d = S0.shape[0]
        A = np.eye(d) + S0 @ self.P_end[0]
        S = _sym(np.linalg.solve(A, S0))
        m = np.linalg.solve(A, init.mean + S0 @ self.q_end[0])
        return GaussianState(m, S)

    def log_mass(self) -> float:
        """``log E_prior[h(t_0, X_0)]``; equals 0 when the normalizers are consistent."""
        init = self.ssm.init
        d = init.dim
        _, _, c = pull_back(self.P_end[0], self.q_end[0], self.c_end[0], np.eye(d), np.asarray(init.mean), np.asarray(init.cov))
        return c


def h_function(
    ssm: LinearGaussianSSM,
    obs: ObservationSeq,
    filt: FilterResult | None = None,
    log_normalizers=None,
) -> HQuadratic:
    """Backward pass over intervals, multiplying in normalized potentials.

    By default each potential is divided by the one-step predictive likelihood
    from the Kalman filter.  Pass ``log_normalizers`` to override (zeros give
    the unnormalized product of likelihoods).
    """
    ssm.check_observations(obs)
    if log_normalizers is None:
        if filt is None:
            filt = kalman_filter(ssm, obs)
        log_normalizers = filt.log_normalizers
    lz = np.asarray(log_normalizers, dtype=np.float64)
    n, d = len(ssm.grid), ssm.dim
    P_end = np.empty((n, d, d))
    q_end = np.empty((n, d))
    c_end = np.empty(n)
    P, q, c = np.zeros((d, d)), np.zeros(d), 0.0
    for i in range(n - 1, -1, -1):
        if i < n - 1:
            F, u, Q = ssm.transition(i)
            P, q, c = pull_back(P, q, c, F, u, Q)
        Pp, qp, cp = potential_form(obs.values[i], obs.mask[i], ssm.emission, lz[i])
        P, q, c = _sym(P + Pp), q + qp, c + cp
        _check_psd(P, f"t={ssm.grid.times[i]}")
        P_end[i], q_end[i], c_end[i] = P, q, c
    return HQuadratic(ssm, P_end, q_end, c_end, lz)


def conditioned_drift(ssm: LinearGaussianSSM, h: HQuadratic, t: float, x) -> np.ndarray:
    """Prior drift plus ``sigma^2 * grad log h``; affine in ``x``."""
    s2 = ssm.diffusion**2
    return ssm.drift(t, x) + s2 * h.grad_log_h(t, x)


@dataclass(frozen=True)
class AffineControl:
    """``alpha(t, x) = sigma^2 (q(t) - P(t) x)``, the optimal feedback control."""

    h: HQuadratic

    @property
    def diffusion(self) -> float:
        return self.h.ssm.diffusion

    def gain_offset(self, t: float, side: str = "right"):
        """``(K, k)`` with ``alpha(t, x) = -K x + k``."""
        P, q, _ = self.h.coefficients(t, side)
        s2 = self.diffusion**2
        return s2 * P, s2 * q

    def __call__(self, t: float, x) -> np.ndarray:
        K, k = self.gain_offset(t)
        return -np.asarray(x, dtype=np.float64) @ K + k


def optimal_control_lg(ssm: LinearGaussianSSM, obs: ObservationSeq) -> AffineControl:
    return AffineControl(h_function(ssm, obs))
