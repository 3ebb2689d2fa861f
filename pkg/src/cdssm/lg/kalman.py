"""Exact filtering, smoothing and evidence for :class:`LinearGaussianSSM`."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from ..types import GaussianState, ObservationSeq
from .model import LinearGaussianSSM

LOG_2PI = float(np.log(2.0 * np.pi))


class SingularInnovation(ValueError):
    pass


@dataclass(frozen=True)
class FilterResult:
    """Predicted and filtered moments per timestamp.

    ``log_normalizers[i]`` is ``log p(y_i | y_0..y_{i-1})`` (0 where nothing is
    observed); their sum is the log evidence.
    """

    pred_means: np.ndarray
    pred_covs: np.ndarray
    filt_means: np.ndarray
    filt_covs: np.ndarray
    log_normalizers: np.ndarray

    @property
    def log_evidence(self) -> float:
        return float(self.log_normalizers.sum())

    @property
    def filtered(self) -> list[GaussianState]:
        return [GaussianState(m, _sym(P)) for m, P in zip(self.filt_means, self.filt_covs)]


def _sym(P):
    return 0.5 * (P + P.T)


def _update(m, P, y, mask_row, emission):
    idx = np.flatnonzero(mask_row)
    if idx.size == 0:
        return m, P, 0.0
    H = emission.matrix[idx]
    R = emission.noise[idx]
    resid = y[idx] - H @ m
    S = _sym(H @ P @ H.T + np.diag(R))
    try:
        cf = cho_factor(S, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularInnovation("innovation covariance is not positive definite") from exc
    logdet = 2.0 * np.log(np.diag(cf[0])).sum()
    w = cho_solve(cf, resid)
    loglik = -0.5 * (resid @ w + logdet + idx.size * LOG_2PI)
    K = cho_solve(cf, H @ P).T
    m_new = m + K @ resid
    IKH = np.eye(P.shape[0]) - K @ H
    P_new = IKH @ P @ IKH.T + (K * R) @ K.T
    return m_new, _sym(P_new), float(loglik)


def kalman_filter(ssm: LinearGaussianSSM, obs: ObservationSeq) -> FilterResult:
    ssm.check_observations(obs)
    n, d = len(ssm.grid), ssm.dim
    pm = np.empty((n, d))
    pc = np.empty((n, d, d))
    fm = np.empty((n, d))
    fc = np.empty((n, d, d))
    lz = np.zeros(n)
    m, P = np.array(ssm.init.mean), np.array(ssm.init.cov)
    for i in range(n):
        if i > 0:
            F, u, Q = ssm.transition(i - 1)
            m = F @ m + u
            P = _sym(F @ P @ F.T + Q)
        pm[i], pc[i] = m, P
        m, P, lz[i] = _update(m, P, obs.values[i], obs.mask[i], ssm.emission)
        fm[i], fc[i] = m, P
    return FilterResult(pm, pc, fm, fc, lz)


def rts_smoother(ssm: LinearGaussianSSM, obs: ObservationSeq, filt: FilterResult | None = None) -> list[GaussianState]:
    """Smoothing marginals ``p(X_{t_i} | all observations)`` at every timestamp."""
    if filt is None:
        filt = kalman_filter(ssm, obs)
    n = len(ssm.grid)
    ms = np.array(filt.filt_means)
    Ps = np.array(filt.filt_covs)
    for i in range(n - 2, -1, -1):
        F, _, _ = ssm.transition(i)
        Pp = filt.pred_covs[i + 1]
        # gain J = P_f F^T Pp^{-1}; pinv covers degenerate (zero-noise) predictions
        cross = filt.filt_covs[i] @ F.T
        try:
            J = np.linalg.solve(Pp.T, cross.T).T
        except np.linalg.LinAlgError:
            J = cross @ np.linalg.pinv(Pp)
        ms[i] = filt.filt_means[i] + J @ (ms[i + 1] - filt.pred_means[i + 1])
        Ps[i] = _sym(filt.filt_covs[i] + J @ (Ps[i + 1] - Pp) @ J.T)
    return [GaussianState(m, P) for m, P in zip(ms, Ps)]


def log_evidence(ssm: LinearGaussianSSM, obs: ObservationSeq) -> float:
    return kalman_filter(ssm, obs).log_evidence


def sample_prior_paths(ssm: LinearGaussianSSM, rng, n: int) -> np.ndarray:
    """Exact draws of ``(X_{t_0}, ..., X_{t_k})``; ``rng`` is a numpy Generator. Shape ``(n, k+1, d)``."""
    d = ssm.dim
    out = np.empty((n, len(ssm.grid), d))
    L0 = _sqrt_psd(ssm.init.cov)
    x = ssm.init.mean + rng.standard_normal((n, d)) @ L0.T
    out[:, 0] = x
    for i in range(ssm.n_intervals):
        F, u, Q = ssm.transition(i)
        x = x @ F.T + u + rng.standard_normal((n, d)) @ _sqrt_psd(Q).T
        out[:, i + 1] = x
    return out


def _sqrt_psd(S):
    S = _sym(np.asarray(S, dtype=np.float64))
    w, V = np.linalg.eigh(S)
    return V * np.sqrt(np.clip(w, 0.0, None))
