"""Control-cost quadrature, potential terms and the Monte Carlo negative ELBO.

For a controlled process whose drift differs from the prior by ``alpha``,

    L(alpha) = E[ int |alpha|^2 / (2 sigma^2) dt - sum_i log g_i(y_i | X_{t_i}) ] + KL(init || prior init)

upper-bounds ``-log Z``.  The gap is the path-space KL divergence to the
posterior, zero at the optimal feedback control started from the
reweighted initial law.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lg.hfunc import AffineControl, HQuadratic
from .lg.kalman import kalman_filter
from .lg.model import GaussianEmission, LinearGaussianSSM
from .lg.sde import bridge_schedule, simulate_affine
from .moments import sample_marginals
from .pscan import moments_via_scan
from .rng import RandomStream
from .types import GaussianState, ObservationSeq, PiecewiseControl


@dataclass(frozen=True)
class ElboEstimate:
    value: float
    std_error: float
    n_samples: int
    control_cost: float
    neg_log_potential: float
    init_kl: float = 0.0

    @property
    def components(self) -> tuple[float, float]:
        return self.control_cost, self.neg_log_potential


def gaussian_kl(p: GaussianState, q: GaussianState) -> float:
    """``KL(p || q)`` for standard-basis Gaussians with ``q`` nondegenerate."""
    d = p.dim
    Sq = np.asarray(q.cov)
    Sp = np.asarray(p.cov)
    diff = np.asarray(q.mean) - np.asarray(p.mean)
    tr = np.trace(np.linalg.solve(Sq, Sp))
    quad = diff @ np.linalg.solve(Sq, diff)
    _, ld_q = np.linalg.slogdet(Sq)
    sign_p, ld_p = np.linalg.slogdet(Sp)
    if sign_p <= 0:
        return float("inf")
    return float(0.5 * (tr + quad - d + ld_q - ld_p))


def control_cost(control, latent_samples=None, times=None, reference_offsets=None) -> np.ndarray | float:
    """Quadrature of ``int |alpha|^2 / (2 sigma^2) dt``.

    * :class:`PiecewiseControl`: ``sum_i dt_i |alpha_i - ref_i|^2 / (2 sigma^2)``,
      exact for piecewise-constant offsets.  ``reference_offsets`` are the prior
      drift offsets (default zero).  Broadcast to one value per sample when
      ``latent_samples`` is given.
    * :class:`AffineControl`: left-rectangle rule on ``times`` using
      ``latent_samples`` of shape ``(n, len(times), d)``.
    """
    if isinstance(control, PiecewiseControl):
        a = control.offsets
        if reference_offsets is not None:
            a = a - np.asarray(reference_offsets, dtype=np.float64).reshape(a.shape)
        dts = control.grid.deltas
        total = float((dts * (a * a).sum(axis=1)).sum() / (2.0 * control.diffusion**2))
        if latent_samples is None:
            return total
        x = np.asarray(latent_samples)
        if x.shape[-1] != control.dim or x.shape[-2] != len(control.grid):
            raise ValueError("latent samples not aligned with the control grid")
        return np.full(x.shape[0], total)
    if isinstance(control, AffineControl):
        if latent_samples is None or times is None:
            raise ValueError("feedback controls need latent samples and their times")
        x = np.asarray(latent_samples, dtype=np.float64)
        times = np.asarray(times, dtype=np.float64)
        if x.ndim != 3 or x.shape[1] != times.size or x.shape[2] != control.h.ssm.dim:
            raise ValueError("latent samples not aligned with the given times")
        s2 = control.diffusion**2
        cost = np.zeros(x.shape[0])
        for i in range(times.size - 1):
            dt = times[i + 1] - times[i]
            if dt == 0:
                continue
            u = control(times[i], x[:, i])
            cost += dt * (u * u).sum(axis=1) / (2.0 * s2)
        return cost
    raise TypeError(f"unsupported control type {type(control).__name__}")


def neg_log_potentials(obs: ObservationSeq, latent_samples, emission: GaussianEmission) -> np.ndarray:
    """``-sum log g_i`` over observed cells, one value per sample."""
    x = np.asarray(latent_samples, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.shape[-2] != len(obs.grid) or x.shape[-1] != emission.state_dim:
        raise ValueError("latent samples not aligned with observations")
    if obs.dim != emission.obs_dim:
        raise ValueError("observation and emission dimensions differ")
    return -emission.log_density(obs.values, obs.mask, x)


def _estimate(values, cost, nlp, kl) -> ElboEstimate:
    values = np.asarray(values, dtype=np.float64)
    n = values.size
    if n < 2:
        raise ValueError("need at least 2 samples for a standard error")
    mean = float(np.sum(values) / n)
    se = float(np.std(values, ddof=1) / np.sqrt(n))
    return ElboEstimate(mean, se, n, float(np.mean(cost)), float(np.mean(nlp)), kl)


def elbo(
    control: PiecewiseControl,
    obs: ObservationSeq,
    emission: GaussianEmission,
    n_samples: int,
    rng: RandomStream,
    init: GaussianState,
    prior_init: GaussianState | None = None,
    reference_offsets=None,
) -> ElboEstimate:
    """Simulation-free estimate of the negative ELBO for a piecewise control.

    Marginals at the grid times come from the closed-form moments; the
    potential term is averaged over independent marginal draws.  A fixed
    ``rng`` gives common random numbers across controls sharing a basis.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    traj = moments_via_scan(init, control)
    x = sample_marginals(traj, rng, n_samples)
    cost = control_cost(control, x, reference_offsets=reference_offsets)
    nlp = neg_log_potentials(obs, x, emission)
    kl = 0.0 if prior_init is None else gaussian_kl(init, prior_init)
    return _estimate(cost + nlp + kl, cost, nlp, kl)


def elbo_feedback(
    control: AffineControl,
    obs: ObservationSeq,
    n_samples: int,
    rng: RandomStream,
    dt: float,
    init: GaussianState | None = None,
) -> ElboEstimate:
    """Negative ELBO of a feedback control by Euler-Maruyama simulation.

    ``init`` defaults to the reweighted initial law, for which the estimate
    is unbiased for ``-log Z`` up to time discretization.
    """
    h: HQuadratic = control.h
    ssm = h.ssm
    if init is None:
        init = h.conditioned_init()
    gains, offsets, sizes, record, ctrl = bridge_schedule(h, ssm.grid.times, dt)
    w, V = np.linalg.eigh(np.asarray(init.cov))
    root = V * np.sqrt(np.clip(w, 0.0, None))
    x0 = init.mean + rng.child(1 << 20).normal((n_samples, ssm.dim)) @ root.T
    paths, cost = simulate_affine(gains, offsets, sizes, record, ssm.diffusion, x0, rng, control=ctrl)
    nlp = neg_log_potentials(obs, paths, ssm.emission)
    kl = gaussian_kl(init, ssm.init)
    return _estimate(cost + nlp + kl, cost, nlp, kl)


def bound_gap(
    control,
    ssm: LinearGaussianSSM,
    obs: ObservationSeq,
    n_samples: int,
    rng: RandomStream,
    init: GaussianState | None = None,
    dt: float | None = None,
):
    """``L(alpha) + log Z`` with a +-3 standard-error interval.

    Piecewise controls are measured against the prior drift offsets of
    ``ssm`` and start from ``init`` (default: the prior initial law).
    """
    log_z = kalman_filter(ssm, obs).log_evidence
    if isinstance(control, AffineControl):
        if dt is None:
            dt = 1e-3 * float(ssm.grid.deltas.min())
        est = elbo_feedback(control, obs, n_samples, rng, dt, init)
    else:
        est = elbo(
            control,
            obs,
            ssm.emission,
            n_samples,
            rng,
            init if init is not None else ssm.init,
            prior_init=ssm.init if init is not None else None,
            reference_offsets=ssm.offsets,
        )
    gap = est.value + log_z
    return gap, (gap - 3 * est.std_error, gap + 3 * est.std_error), est, log_z
