"""Linear-Gaussian continuous-discrete models with piecewise-constant drift."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..moments import step_coefficients
from ..types import GaussianState, ObservationSeq, PiecewiseControl, SpdOperator, TimeGrid

MIN_NOISE = 1e-8


@dataclass(frozen=True)
class GaussianEmission:
    """``y = H x + v`` with ``v ~ N(0, diag(noise))``; ``H`` defaults to the identity."""

    matrix: np.ndarray
    noise: np.ndarray

    def __post_init__(self):
        H = np.array(np.atleast_2d(self.matrix), dtype=np.float64)
        R = np.array(np.broadcast_to(np.asarray(self.noise, dtype=np.float64), (H.shape[0],)))
        if not np.all(np.isfinite(H)):
            raise ValueError("emission matrix must be finite")
        if not np.all(np.isfinite(R)) or np.any(R <= 0):
            raise ValueError("emission noise variances must be positive and finite")
        H.setflags(write=False)
        R.setflags(write=False)
        object.__setattr__(self, "matrix", H)
        object.__setattr__(self, "noise", R)

    @staticmethod
    def identity(d: int, noise) -> "GaussianEmission":
        return GaussianEmission(np.eye(d), noise)

    @property
    def obs_dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def state_dim(self) -> int:
        return self.matrix.shape[1]

    def observed(self, mask_row) -> tuple[np.ndarray, np.ndarray]:
        """Rows of ``H`` and entries of ``R`` for the observed coordinates."""
        idx = np.flatnonzero(mask_row)
        return self.matrix[idx], self.noise[idx]

    def log_density(self, y, mask, x) -> np.ndarray:
        """Sum over observed cells of ``log N(y_ij; (H x_i)_j, R_j)``.

        ``y`` and ``mask`` are ``(k, m)``; ``x`` is ``(..., k, d)``.  Returns one
        value per leading sample index.
        """
        y = np.asarray(y, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        mean = np.asarray(x, dtype=np.float64) @ self.matrix.T
        resid = np.where(mask, y - mean, 0.0)
        quad = (resid * resid / self.noise).sum(axis=(-2, -1))
        norm = (mask * np.log(2.0 * np.pi * self.noise)).sum()
        return -0.5 * (quad + norm)


@dataclass(frozen=True)
class LinearGaussianSSM:
    """Prior ``dX = (-A_i X + beta_i) dt + sigma dW`` on ``[t_{i-1}, t_i)``, Gaussian emissions."""

    grid: TimeGrid
    operator: SpdOperator
    offsets: np.ndarray
    diffusion: float
    init: GaussianState
    emission: GaussianEmission

    def __post_init__(self):
        d = self.operator.dim
        b = np.array(np.asarray(self.offsets, dtype=np.float64).reshape(-1, d))
        if b.shape[0] != self.grid.n_intervals or self.operator.n_intervals != self.grid.n_intervals:
            raise ValueError("need one spectrum and one offset per grid interval")
        if self.init.dim != d or self.init.eigen:
            raise ValueError("init must be a standard-basis state of the latent dimension")
        if self.emission.state_dim != d:
            raise ValueError("emission matrix columns must equal the latent dimension")
        s = float(self.diffusion)
        if not (np.isfinite(s) and s >= 0):
            raise ValueError("diffusion must be finite and >= 0")
        b.setflags(write=False)
        object.__setattr__(self, "offsets", b)
        object.__setattr__(self, "diffusion", s)

    @property
    def dim(self) -> int:
        return self.operator.dim

    @property
    def n_intervals(self) -> int:
        return self.grid.n_intervals

    def prior_control(self) -> PiecewiseControl:
        return PiecewiseControl(self.grid, self.operator, self.offsets, self.diffusion)

    def interval_of(self, t: float) -> int:
        """0-based index of the interval ``[t_{i}, t_{i+1})`` holding ``t``; the last one at ``T``."""
        i = self.grid.locate(t)
        return min(i, self.n_intervals - 1)

    def transition(self, i: int, tau: float | None = None):
        """Exact kernel ``x' = F x + u + N(0, Q)`` over ``tau`` (default: full interval ``i``)."""
        E = self.operator.basis
        if tau is None:
            tau = float(self.grid.deltas[i])
        decay, gain, _, vgain = step_coefficients(self.operator.spectra[i], tau, self.diffusion)
        beta_hat = self.offsets[i] @ E
        F = (E * decay) @ E.T
        u = E @ (gain * beta_hat)
        Q = (E * vgain) @ E.T
        return F, u, 0.5 * (Q + Q.T)

    def drift(self, t: float, x) -> np.ndarray:
        i = self.interval_of(float(t))
        return -np.asarray(x) @ self.operator.matrix(i) + self.offsets[i]

    def check_observations(self, obs: ObservationSeq) -> None:
        if len(obs.grid) != len(self.grid) or not np.array_equal(obs.grid.times, self.grid.times):
            raise ValueError("observation grid differs from the model grid")
        if obs.dim != self.emission.obs_dim:
            raise ValueError(f"observation dim {obs.dim} != emission dim {self.emission.obs_dim}")


def random_ssm(
    rng,
    d: int,
    k: int,
    obs_dim: int | None = None,
    interval_range=(0.2, 1.0),
    spectrum_range=(0.1, 2.0),
    noise_range=(0.05, 0.5),
    diffusion: float = 1.0,
    mask_prob: float = 0.0,
    identity_emission: bool = True,
    aligned_init: bool = False,
) -> tuple[LinearGaussianSSM, ObservationSeq]:
    """Draw a random model and a synthetic observation sequence from it.

    ``rng`` is a :class:`numpy.random.Generator`.  Timestamps start at 0 and
    the observation at ``t_0`` is masked out, so every potential sits at the
    end of an interval.  ``aligned_init`` makes the initial covariance
    diagonal in the operator's eigenbasis, which the closed-form moment
    propagation needs to be exact.
    """
    from scipy.stats import ortho_group

    m = d if obs_dim is None else obs_dim
    times = np.concatenate([[0.0], np.cumsum(rng.uniform(*interval_range, size=k))])
    grid = TimeGrid(times)
    E = ortho_group.rvs(d, random_state=rng) if d > 1 else np.ones((1, 1))
    spectra = rng.uniform(*spectrum_range, size=(k, d))
    offsets = rng.normal(scale=0.5, size=(k, d))
    if aligned_init:
        S0 = (E * rng.uniform(0.2, 1.0, size=d)) @ E.T
        S0 = 0.5 * (S0 + S0.T)
    else:
        L = rng.normal(scale=0.5, size=(d, d))
        S0 = L @ L.T + 0.2 * np.eye(d)
    init = GaussianState(rng.normal(size=d), S0)
    if identity_emission and m == d:
        H = np.eye(d)
    else:
        H = rng.normal(size=(m, d))
    emission = GaussianEmission(H, rng.uniform(*noise_range, size=m))
    ssm = LinearGaussianSSM(grid, SpdOperator(E, spectra), offsets, diffusion, init, emission)
    from .kalman import sample_prior_paths

    x = sample_prior_paths(ssm, rng, 1)[0]
    y = x @ H.T + rng.normal(size=(k + 1, m)) * np.sqrt(emission.noise)
    mask = rng.uniform(size=(k + 1, m)) >= mask_prob
    mask[0] = False
    y = np.where(mask, y, 0.0)
    return ssm, ObservationSeq(grid, y, mask)
