import math

import numpy as np
import pytest

from cdssm.lg.hfunc import conditioned_drift, h_function, optimal_control_lg
from cdssm.lg.kalman import kalman_filter, log_evidence, rts_smoother, sample_prior_paths
from cdssm.lg.model import GaussianEmission, LinearGaussianSSM, random_ssm
from cdssm.lg.pde import hjb_residual_check
from cdssm.lg.sde import Diverged, sample_em_chain, simulate_affine, simulate_sde, step_schedule
from cdssm.moments import propagate_sequential
from cdssm.oracle import bridge_vs_smoother, static_case
from cdssm.rng import RandomStream
from cdssm.types import GaussianState, ObservationSeq, SpdOperator, TimeGrid

from oracles import dense_posterior, finite_difference


def brownian(T, y, R, sigma=1.0, x0_var=1.0):
    """1D Brownian prior on ``[0, T]`` with a single observation at ``T``."""
    grid = TimeGrid([0.0, T])
    ssm = LinearGaussianSSM(
        grid, SpdOperator(np.eye(1), np.zeros((1, 1))), np.zeros((1, 1)), sigma,
        GaussianState([0.0], [[x0_var]]), GaussianEmission.identity(1, R),
    )
    return ssm, ObservationSeq(grid, [[0.0], [y]], [[False], [True]])


# ------------------------------------------------------------------ filter / smoother


def test_static_log_evidence():
    ssm, obs = static_case()
    assert log_evidence(ssm, obs) == pytest.approx(-0.5 * math.log(4 * math.pi), abs=1e-12)
    assert log_evidence(ssm, obs) == pytest.approx(-1.2655121, abs=1e-7)


def test_no_observations():
    g = np.random.default_rng(0)
    ssm, obs = random_ssm(g, 2, 4, mask_prob=1.0)
    f = kalman_filter(ssm, obs)
    assert f.log_evidence == 0.0
    x = ssm.init.mean
    P = np.asarray(ssm.init.cov)
    for i, st in enumerate(f.filtered):
        if i:
            F, u, Q = ssm.transition(i - 1)
            x, P = F @ x + u, F @ P @ F.T + Q
        assert np.allclose(st.mean, x, atol=1e-13) and np.allclose(st.cov, P, atol=1e-13)


@pytest.mark.parametrize("seed", range(12))
def test_evidence_and_marginals_match_dense_conditioning(seed):
    g = np.random.default_rng(seed)
    d = 1 + seed % 3
    k = 6 if seed < 6 else int(g.integers(1, 7))
    ssm, obs = random_ssm(g, d, k, obs_dim=d + (seed % 2), identity_emission=seed % 2 == 0, mask_prob=0.3)
    marg, log_z = dense_posterior(ssm, obs)
    assert log_evidence(ssm, obs) == pytest.approx(log_z, abs=1e-8)
    for st, (m, C) in zip(rts_smoother(ssm, obs), marg):
        assert np.allclose(st.mean, m, atol=1e-10)
        assert np.allclose(st.cov, C, atol=1e-10)


def test_single_timestamp_smoother_equals_filter():
    ssm, obs = static_case()
    f = kalman_filter(ssm, obs).filtered
    s = rts_smoother(ssm, obs)
    assert np.array_equal(f[0].mean, s[0].mean) and np.array_equal(f[0].cov, s[0].cov)


def test_symmetric_two_interval_middle_marginal():
    grid = TimeGrid([0.0, 1.0, 2.0])
    ssm = LinearGaussianSSM(
        grid, SpdOperator(np.eye(1), np.full((2, 1), 0.5)), np.zeros((2, 1)), 1.0,
        GaussianState([0.0], [[1.0]]), GaussianEmission.identity(1, 0.2),
    )
    obs = ObservationSeq(grid, [[1.0], [0.0], [1.0]], [[True], [False], [True]])
    marg, _ = dense_posterior(ssm, obs)
    mid = rts_smoother(ssm, obs)[1]
    assert np.allclose(mid.mean, marg[1][0], atol=1e-10) and np.allclose(mid.cov, marg[1][1], atol=1e-10)


def test_uninformative_observations_leave_prior():
    g = np.random.default_rng(3)
    ssm, obs = random_ssm(g, 2, 3)
    vague = LinearGaussianSSM(ssm.grid, ssm.operator, ssm.offsets, ssm.diffusion, ssm.init, GaussianEmission.identity(2, 1e8))
    x, P = ssm.init.mean, np.asarray(ssm.init.cov)
    for i, st in enumerate(rts_smoother(vague, obs)):
        if i:
            F, u, Q = ssm.transition(i - 1)
            x, P = F @ x + u, F @ P @ F.T + Q
        assert np.allclose(st.mean, x, atol=1e-3) and np.allclose(st.cov, P, atol=1e-3)


def test_observation_grid_must_match():
    ssm, obs = brownian(1.0, 0.0, 1.0)
    other = ObservationSeq(TimeGrid([0.0, 2.0]), obs.values, obs.mask)
    with pytest.raises(ValueError):
        kalman_filter(ssm, other)


# ------------------------------------------------------------------ h-function


@pytest.mark.parametrize("t", [0.0, 0.3, 1.1, 1.9])
def test_brownian_heat_kernel_precision(t):
    T, R = 2.0, 0.4
    ssm, obs = brownian(T, 0.7, R)
    P, q, _ = h_function(ssm, obs).coefficients(t)
    assert P[0, 0] == pytest.approx(1.0 / (R + T - t), rel=1e-12)
    assert q[0] == pytest.approx(0.7 / (R + T - t), rel=1e-12)


def test_terminal_value_is_normalized_potential():
    g = np.random.default_rng(4)
    ssm, obs = random_ssm(g, 2, 3)
    h = h_function(ssm, obs)
    T = ssm.grid.horizon
    x = g.normal(size=(5, 2))
    lz = kalman_filter(ssm, obs).log_normalizers[-1]
    expect = ssm.emission.log_density(obs.values[-1:], obs.mask[-1:], x[:, None, :]) - lz
    assert np.allclose(h.log_h(T, x), expect, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_h_has_unit_prior_mass(seed):
    g = np.random.default_rng(seed)
    ssm, obs = random_ssm(g, 1 + seed % 2, 3)
    h = h_function(ssm, obs)
    assert abs(h.log_mass()) < 1e-12
    n = 100_000
    paths = sample_prior_paths(ssm, np.random.default_rng(50 + seed), n)
    lz = kalman_filter(ssm, obs).log_normalizers
    w = np.exp(ssm.emission.log_density(obs.values, obs.mask, paths) - lz.sum())
    assert abs(w.mean() - 1.0) < 4 * w.std(ddof=1) / math.sqrt(n)


def test_uninformative_potentials_give_prior_drift():
    ssm, obs = brownian(1.0, 3.0, 1e8)
    h = h_function(ssm, obs)
    x = np.array([[0.5], [-2.0]])
    assert np.allclose(conditioned_drift(ssm, h, 0.4, x), ssm.drift(0.4, x), atol=1e-7)
    assert np.allclose(optimal_control_lg(ssm, obs)(0.4, x), 0.0, atol=1e-7)


@pytest.mark.parametrize("t", [0.0, 0.5, 0.9])
def test_pinned_endpoint_gives_bridge_drift(t):
    y, T = 1.5, 1.0
    ssm, obs = brownian(T, y, 1e-8)
    x = np.array([[-1.0], [0.2], [2.0]])
    drift = conditioned_drift(ssm, h_function(ssm, obs), t, x)
    assert np.allclose(drift, (y - x) / (T - t), rtol=1e-6)
    ctrl = optimal_control_lg(ssm, obs)
    assert np.allclose(ctrl(t, x), (y - x) / (T - t), rtol=1e-6)


@pytest.mark.parametrize("seed", range(10))
def test_gradient_matches_finite_differences(seed):
    g = np.random.default_rng(seed)
    ssm, obs = random_ssm(g, 1 + seed % 3, 4, diffusion=g.uniform(0.5, 1.5))
    h = h_function(ssm, obs)
    t = float(g.uniform(0, ssm.grid.horizon))
    x = g.normal(size=ssm.dim)
    fd = finite_difference(lambda z: float(h.log_h(t, z)), x, eps=1e-5)
    an = h.grad_log_h(t, x)
    assert np.max(np.abs(an - fd)) <= 1e-6 * max(1.0, np.max(np.abs(an)))
    s2 = ssm.diffusion**2
    assert np.allclose(conditioned_drift(ssm, h, t, x), ssm.drift(t, x) + s2 * an, atol=1e-14)


def test_conditioned_drift_out_of_range():
    ssm, obs = brownian(1.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        conditioned_drift(ssm, h_function(ssm, obs), 1.5, np.zeros(1))


def test_conditioned_init_is_posterior_at_start():
    g = np.random.default_rng(8)
    ssm, obs = random_ssm(g, 2, 3)
    init = h_function(ssm, obs).conditioned_init()
    first = rts_smoother(ssm, obs)[0]
    assert np.allclose(init.mean, first.mean, atol=1e-10) and np.allclose(init.cov, first.cov, atol=1e-10)


# ------------------------------------------------------------------ simulation


def test_zero_drift_zero_noise_paths_are_constant():
    x0 = np.random.default_rng(0).normal(size=(10, 2))
    paths = simulate_sde(lambda t, x: np.zeros_like(x), 0.0, x0, [0.0, 0.5, 1.0], 0.01, RandomStream(0))
    assert np.array_equal(paths, np.broadcast_to(x0[:, None, :], paths.shape))


def test_prior_simulation_matches_closed_form_moments():
    grid = TimeGrid([0.0, 0.7, 1.5])
    op = SpdOperator(np.eye(1), np.array([[1.2], [0.4]]))
    ssm = LinearGaussianSSM(grid, op, np.array([[0.5], [-1.0]]), 0.8, GaussianState([1.0], [[0.3]]), GaussianEmission.identity(1, 1.0))
    traj = propagate_sequential(ssm.init, ssm.prior_control())
    n = 100_000
    x0 = 1.0 + math.sqrt(0.3) * np.random.default_rng(1).standard_normal((n, 1))
    paths = simulate_sde(ssm.drift, ssm.diffusion, x0, grid.times, 1e-3, RandomStream(2))
    for i in range(1, 3):
        x = paths[:, i, 0]
        assert abs(x.mean() - traj.means[i, 0]) < 3 * x.std() / math.sqrt(n)
        assert abs(x.var() - traj.variances[i, 0]) < 3 * traj.variances[i, 0] * math.sqrt(2 / n)


def test_divergence_is_reported():
    with pytest.raises(Diverged), np.errstate(over="ignore", invalid="ignore"):
        simulate_sde(lambda t, x: x * 1e300, 0.0, np.ones((2, 1)), [0.0, 1.0], 0.1, RandomStream(0))


def test_step_schedule_hits_every_record_time():
    starts, sizes, record = step_schedule([0.0, 0.25, 0.25, 1.0], 0.1)
    assert list(record) == [0, 3, 3, 11]
    assert sizes.sum() == pytest.approx(1.0)
    assert np.all(sizes <= 0.1 + 1e-15)


def _chain_moments(ssm, dt):
    """Exact mean and covariance of stepwise Euler-Maruyama, iterated as matrices."""
    m, S = ssm.init.mean.copy(), np.array(ssm.init.cov)
    out = [(m, S)]
    for i, delta in enumerate(ssm.grid.deltas):
        n = max(1, math.ceil(delta / dt - 1e-12))
        h = delta / n
        M = np.eye(ssm.dim) - h * ssm.operator.matrix(i)
        for _ in range(n):
            m = M @ m + h * ssm.offsets[i]
            S = M @ S @ M.T + ssm.diffusion**2 * h * np.eye(ssm.dim)
        out.append((m, S))
    return out


@pytest.mark.parametrize("seed", range(3))
def test_exact_chain_and_stepwise_chain_share_their_law(seed):
    g = np.random.default_rng(seed)
    ssm, _ = random_ssm(g, 2, 3, aligned_init=True)
    dt = 0.2
    ref = _chain_moments(ssm, dt)
    n = 60_000
    exact = sample_em_chain(ssm.prior_control(), ssm.init, dt, n, RandomStream(seed, 1))
    starts, sizes, record = step_schedule(ssm.grid.times, dt)
    gains = np.stack([ssm.operator.matrix(ssm.interval_of(float(t))) for t in starts])
    offs = np.stack([ssm.offsets[ssm.interval_of(float(t))] for t in starts])
    x0 = exact[:, 0].copy()
    stepped = simulate_affine(gains, offs, sizes, record, ssm.diffusion, x0, RandomStream(seed, 2))
    for paths in (exact, stepped):
        for i, (m, S) in enumerate(ref):
            x = paths[:, i]
            se = np.sqrt(np.diag(S) / n)
            assert np.all(np.abs(x.mean(0) - m) < 4 * se)
            assert np.allclose(np.cov(x.T), S, rtol=0.05, atol=0.05 * np.abs(S).max())


def test_affine_backends_agree():
    from cdssm import _accel

    if not _accel.NUMBA_ENABLED:
        pytest.skip("numba disabled")
    g = np.random.default_rng(5)
    S = 300
    gains = np.tile(np.eye(2) * 0.5, (S, 1, 1))
    offs = g.normal(size=(S, 2))
    sizes = np.full(S, 0.01)
    record = np.array([0, 100, 300])
    x0 = g.normal(size=(50, 2))
    a = simulate_affine(gains, offs, sizes, record, 0.7, x0, RandomStream(3), backend="numba")
    b = simulate_affine(gains, offs, sizes, record, 0.7, x0, RandomStream(3), backend="numpy")
    assert np.allclose(a, b, rtol=1e-12, atol=1e-12)


def test_bridge_reproduces_smoothed_marginals():
    g = np.random.default_rng(11)
    ssm, obs = random_ssm(g, 1, 2, interval_range=(0.5, 1.0), aligned_init=True)
    z, v = bridge_vs_smoother(ssm, obs, 20_000, RandomStream(0, 9), dt=2e-3)
    assert z < 4.0 and v < 0.05


# ------------------------------------------------------------------ PDE residuals


def test_brownian_residuals_shrink_quadratically():
    ssm, obs = brownian(2.0, 0.5, 0.3)
    rep = hjb_residual_check(ssm, obs, 0.1, levels=3)
    assert np.all(np.abs(rep.h_ratios - 4.0) < 0.3)
    assert np.all(np.abs(rep.hjb_ratios - 4.0) < 0.3)


def test_constant_h_has_zero_residual():
    ssm, obs = brownian(2.0, 0.5, 0.3)
    empty = ObservationSeq(obs.grid, obs.values, np.zeros_like(obs.mask))
    rep = hjb_residual_check(ssm, empty, 0.1, levels=2)
    assert np.all(rep.h_residuals == 0.0) and np.all(rep.hjb_residuals == 0.0)


def test_two_dimensional_residuals():
    g = np.random.default_rng(2)
    ssm, obs = random_ssm(g, 2, 2, interval_range=(0.8, 1.0))
    rep = hjb_residual_check(ssm, obs, 0.05, levels=2, space_points=5)
    assert np.all(np.abs(rep.h_ratios - 4.0) < 0.5)


def test_coarse_lattice_rejected():
    ssm, obs = brownian(0.5, 0.0, 1.0)
    with pytest.raises(ValueError, match="coarse"):
        hjb_residual_check(ssm, obs, 0.1)
    g = np.random.default_rng(0)
    big, bobs = random_ssm(g, 3, 2)
    with pytest.raises(ValueError):
        hjb_residual_check(big, bobs, 0.01)
