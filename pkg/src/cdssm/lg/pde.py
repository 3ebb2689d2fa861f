"""Finite-difference residuals of the backward equations satisfied by ``h`` and ``V = -log h``.

Between observation times ``h`` solves the linear backward Kolmogorov
equation ``h_t + b . grad h + (sigma^2 / 2) lap h = 0`` and ``V`` solves the
HJB equation ``V_t + b . grad V + (sigma^2 / 2) lap V - (sigma^2 / 2) |grad V|^2 = 0``.
The analytic ``h`` satisfies both exactly, so central-difference residuals
shrink like the square of the stencil width.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from ..types import ObservationSeq
from .hfunc import HQuadratic, h_function
from .kalman import rts_smoother
from .model import LinearGaussianSSM

MIN_POINTS_PER_INTERVAL = 8


@dataclass(frozen=True)
class ResidualReport:
    stencils: np.ndarray
    h_residuals: np.ndarray
    hjb_residuals: np.ndarray

    @staticmethod
    def _ratios(r):
        r = np.asarray(r)
        with np.errstate(divide="ignore", invalid="ignore"):
            return r[:-1] / r[1:]

    @property
    def h_ratios(self) -> np.ndarray:
        return self._ratios(self.h_residuals)

    @property
    def hjb_ratios(self) -> np.ndarray:
        return self._ratios(self.hjb_residuals)


def _space_lattice(ssm, obs, n_per_dim):
    """Box of +-2.5 smoothing standard deviations around the smoothed means."""
    sm = rts_smoother(ssm, obs)
    means = np.array([s.mean for s in sm])
    sds = np.sqrt(np.array([np.diag(s.cov) for s in sm]))
    lo = (means - 2.5 * sds).min(axis=0)
    hi = (means + 2.5 * sds).max(axis=0)
    axes = [np.linspace(a, b, n_per_dim) for a, b in zip(lo, hi)]
    return np.array(list(itertools.product(*axes)))


def _residuals_at(h: HQuadratic, t: float, x: np.ndarray, s: float):
    ssm = h.ssm
    d = ssm.dim
    s2 = ssm.diffusion**2
    b = ssm.drift(t, x)
    logh = lambda tt, xx: h.log_h(tt, xx)  # noqa: E731
    V0 = -logh(t, x)
    Vt = (-logh(t + s, x) + logh(t - s, x)) / (2 * s)
    h0 = np.exp(-V0)
    ht = (np.exp(logh(t + s, x)) - np.exp(logh(t - s, x))) / (2 * s)
    gradV = np.empty_like(x)
    lapV = np.zeros(x.shape[0])
    gradh = np.empty_like(x)
    laph = np.zeros(x.shape[0])
    for k in range(d):
        e = np.zeros(d)
        e[k] = s
        Vp, Vm = -logh(t, x + e), -logh(t, x - e)
        gradV[:, k] = (Vp - Vm) / (2 * s)
        lapV += (Vp - 2 * V0 + Vm) / (s * s)
        hp, hm = np.exp(-Vp), np.exp(-Vm)
        gradh[:, k] = (hp - hm) / (2 * s)
        laph += (hp - 2 * h0 + hm) / (s * s)
    res_h = ht + (b * gradh).sum(axis=1) + 0.5 * s2 * laph
    res_V = Vt + (b * gradV).sum(axis=1) + 0.5 * s2 * lapV - 0.5 * s2 * (gradV**2).sum(axis=1)
    return np.abs(res_h).max(), np.abs(res_V).max()


def hjb_residual_check(
    ssm: LinearGaussianSSM,
    obs: ObservationSeq,
    grid_spacing: float,
    levels: int = 3,
    space_points: int = 9,
    h: HQuadratic | None = None,
) -> ResidualReport:
    """Max residuals over a fixed lattice for stencil widths ``s, s/2, ..., s/2^levels``.

    The time lattice has spacing ``grid_spacing`` inside every interval and
    stays one spacing away from the interval ends, so every stencil stays on
    one side of each observation time.
    """
    if ssm.dim not in (1, 2):
        raise ValueError("residual check supports 1D and 2D models only")
    if not (grid_spacing > 0 and np.isfinite(grid_spacing)):
        raise ValueError("grid_spacing must be positive")
    if h is None:
        h = h_function(ssm, obs)
    times = ssm.grid.times
    t_eval = []
    for j in range(ssm.n_intervals):
        delta = times[j + 1] - times[j]
        n = int(np.floor(delta / grid_spacing + 1e-9))
        if n < MIN_POINTS_PER_INTERVAL:
            raise ValueError(
                f"lattice too coarse: interval {j} has {n} points at spacing {grid_spacing} "
                f"(need >= {MIN_POINTS_PER_INTERVAL})"
            )
        t_eval.extend(times[j] + grid_spacing * np.arange(1, n))
    x = _space_lattice(ssm, obs, space_points)
    stencils = grid_spacing / 2.0 ** np.arange(levels + 1)
    res_h = np.zeros(stencils.size)
    res_V = np.zeros(stencils.size)
    for li, s in enumerate(stencils):
        for t in t_eval:
            rh, rv = _residuals_at(h, float(t), x, float(s))
            res_h[li] = max(res_h[li], rh)
            res_V[li] = max(res_V[li], rv)
    return ResidualReport(stencils, res_h, res_V)
