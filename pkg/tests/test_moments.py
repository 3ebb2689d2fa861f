import numpy as np
import pytest
from scipy.stats import norm, ortho_group

from cdssm.moments import (
    local_step,
    marginal_at,
    phi1,
    propagate_sequential,
    sample_marginals,
)
from cdssm.rng import RandomStream
from cdssm.types import GaussianState, PiecewiseControl, SpdOperator, TimeGrid

from oracles import euler_maruyama, transition_by_quadrature


def eig(m, v):
    return GaussianState(np.atleast_1d(m), np.atleast_1d(v), eigen=True)


def test_zero_interval_returns_same_state():
    s = eig([0.3, -1.0], [0.2, 0.7])
    assert local_step(s, [1.0, 2.0], [0.5, 0.5], 0.0) is s


def test_zero_rate_is_brownian_with_drift():
    s = local_step(eig([1.0], [0.5]), [0.0], [2.0], 0.75, 1.0)
    assert s.mean[0] == pytest.approx(1.0 + 1.5, abs=1e-15)
    assert s.cov[0] == pytest.approx(0.5 + 0.75, abs=1e-15)


WORKED_MEAN = 0.6321205588285577
WORKED_VAR = 0.5676676416183064


def test_worked_example_closed_form():
    s = local_step(eig([0.0], [1.0]), [1.0], [1.0], 1.0, 1.0)
    assert s.mean[0] == pytest.approx(WORKED_MEAN, abs=1e-15)
    assert s.cov[0] == pytest.approx(WORKED_VAR, abs=1e-15)


def test_worked_example_against_simulation():
    rng = np.random.default_rng(0)
    n = 10**5
    x0 = rng.standard_normal((n, 1))
    paths = euler_maruyama([np.eye(1)], [np.ones(1)], 1.0, [0.0, 1.0], x0, 1e-3, rng)
    x = paths[:, -1, 0]
    se = x.std(ddof=1) / np.sqrt(n)
    assert abs(x.mean() - WORKED_MEAN) < 3 * se
    var_se = x.var(ddof=1) * np.sqrt(2.0 / (n - 1))
    assert abs(x.var(ddof=1) - WORKED_VAR) < 3 * var_se


def test_tiny_rate_matches_zero_rate_branch():
    s0 = eig([0.4], [0.9])
    a = local_step(s0, [1e-9], [1.3], 2.0)
    b = local_step(s0, [0.0], [1.3], 2.0)
    assert a.mean[0] == pytest.approx(b.mean[0], rel=1e-7)
    assert a.cov[0] == pytest.approx(b.cov[0], rel=1e-7)


def test_phi1_series_agrees_with_exact_form():
    x = np.array([1e-8, 1e-6, 5e-5, 9.99e-5])
    exact = np.array([float(-np.expm1(-v) / v) for v in x])
    assert np.max(np.abs(phi1(x) - exact)) < 1e-12
    # no jump at the branch threshold
    assert abs(phi1(1e-4 * (1 - 1e-12)) - phi1(1e-4)) < 1e-9


@pytest.mark.parametrize("lam", [0.0, 1e-12, 1e-6, 0.3, 4.0])
def test_step_matches_quadrature(lam):
    F, u, Q = transition_by_quadrature(np.array([[lam]]), np.array([0.7]), 1.3, 0.9)
    s = local_step(eig([0.5], [0.2]), [lam], [0.7], 0.9, 1.3)
    assert s.mean[0] == pytest.approx(F[0, 0] * 0.5 + u[0], abs=1e-12)
    assert s.cov[0] == pytest.approx(F[0, 0] ** 2 * 0.2 + Q[0, 0], abs=1e-12)


def test_step_rejects_bad_inputs():
    s = eig([0.0], [1.0])
    for kw in ({"dt": -1.0}, {"lam": [-0.1]}, {"alpha": [np.nan]}):
        with pytest.raises(ValueError):
            local_step(s, kw.get("lam", [1.0]), kw.get("alpha", [0.0]), kw.get("dt", 1.0))
    with pytest.raises(ValueError):
        local_step(GaussianState([0.0], [[1.0]]), [1.0], [0.0], 1.0)


@pytest.mark.parametrize("seed", range(200))
def test_semigroup(seed):
    g = np.random.default_rng(seed)
    d = int(g.integers(1, 5))
    lam = g.uniform(0, 3, d) * (g.uniform(size=d) > 0.2)
    alpha = g.normal(size=d)
    a, b = g.uniform(0, 2, 2)
    sigma = g.uniform(0.2, 2)
    s = eig(g.normal(size=d), g.uniform(0, 2, d))
    two = local_step(local_step(s, lam, alpha, a, sigma), lam, alpha, b, sigma)
    one = local_step(s, lam, alpha, a + b, sigma)
    assert np.max(np.abs(two.mean - one.mean)) < 1e-12
    assert np.max(np.abs(two.cov - one.cov)) < 1e-12


@pytest.mark.parametrize("seed", range(10))
def test_positive_variance_after_noisy_step(seed):
    g = np.random.default_rng(seed)
    s = local_step(eig([0.0, 0.0], [0.0, 0.0]), g.uniform(0, 50, 2), [0.0, 0.0], g.uniform(1e-6, 1), 0.3)
    assert np.all(s.cov > 0)


@pytest.mark.parametrize("lam", [0.1, 1.0, 7.0])
def test_converges_to_stationary_law(lam):
    mu, sigma = np.array([1.5]), 0.8
    s = eig([-3.0], [4.0])
    dt = 0.5 / lam
    for _ in range(100):
        s = local_step(s, [lam], lam * mu, dt, sigma)
    assert abs(s.mean[0] - mu[0]) < 1e-8
    assert abs(s.cov[0] - sigma**2 / (2 * lam)) < 1e-8


def test_continuity_across_small_rate_threshold():
    s = eig([0.2], [0.4])
    dt = 1.0
    below = local_step(s, [1e-4 * (1 - 1e-9)], [1.0], dt)
    above = local_step(s, [1e-4 * (1 + 1e-9)], [1.0], dt)
    assert abs(below.mean[0] - above.mean[0]) < 1e-9
    assert abs(below.cov[0] - above.cov[0]) < 1e-9


def _control(g, d, k, horizon=1.0, sigma=None):
    times = np.concatenate([[0.0], np.sort(g.uniform(0, horizon, k))])
    E = ortho_group.rvs(d, random_state=g) if d > 1 else np.eye(1)
    op = SpdOperator(E, g.uniform(0.0, 2.0, (k, d)))
    sigma = g.uniform(0.5, 1.5) if sigma is None else sigma
    return PiecewiseControl(TimeGrid(times), op, g.normal(size=(k, d)), sigma)


def test_single_interval_equals_one_step():
    g = np.random.default_rng(1)
    ctrl = _control(g, 3, 1)
    init = GaussianState([0.1, 0.2, 0.3], [0.5, 0.6, 0.7], eigen=True)
    traj = propagate_sequential(init, ctrl)
    rotated = eig(init.mean @ ctrl.operator.basis, init.cov)
    step = local_step(rotated, ctrl.operator.spectra[0], ctrl.offsets_eigen()[0], ctrl.grid.deltas[0], ctrl.diffusion)
    assert np.allclose(traj.means[1], step.mean, rtol=1e-15, atol=1e-15)
    assert np.allclose(traj.variances[1], step.cov, rtol=1e-15, atol=1e-15)


def test_brownian_variance_growth():
    times = np.array([0.0, 0.3, 1.0, 2.5])
    ctrl = PiecewiseControl(TimeGrid(times), SpdOperator(np.eye(2), np.zeros((3, 2))), np.zeros((3, 2)), 1.0)
    traj = propagate_sequential(GaussianState([1.0, -1.0], np.diag([0.2, 0.0])), ctrl)
    assert np.array_equal(traj.means, np.tile([1.0, -1.0], (4, 1)))
    assert np.allclose(traj.variances, np.array([0.2, 0.0]) + times[:, None], atol=1e-15)


def test_initial_state_rotated_into_eigenbasis():
    g = np.random.default_rng(2)
    ctrl = _control(g, 3, 2)
    E = ctrl.operator.basis
    D = np.diag([0.3, 1.0, 2.0])
    init = GaussianState(g.normal(size=3), E @ D @ E.T)
    traj = propagate_sequential(init, ctrl)
    assert np.allclose(traj.means[0], E.T @ init.mean, atol=1e-14)
    assert np.allclose(traj.variances[0], np.diag(D), atol=1e-14)


def test_non_aligned_initial_covariance_warns(caplog):
    ctrl = PiecewiseControl(TimeGrid([0.0, 1.0]), SpdOperator(np.eye(2), np.ones((1, 2))), np.zeros((1, 2)))
    with caplog.at_level("WARNING"):
        propagate_sequential(GaussianState([0.0, 0.0], [[1.0, 0.5], [0.5, 1.0]]), ctrl)
    assert "not diagonal" in caplog.text


def test_dimension_mismatch():
    ctrl = PiecewiseControl(TimeGrid([0.0, 1.0]), SpdOperator(np.eye(2), np.ones((1, 2))), np.zeros((1, 2)))
    with pytest.raises(ValueError):
        propagate_sequential(GaussianState([0.0], [[1.0]]), ctrl)


@pytest.mark.parametrize("seed", range(10))
def test_sequential_matches_quadrature_chain(seed):
    g = np.random.default_rng(100 + seed)
    d, k = int(g.integers(1, 5)), int(g.integers(1, 9))
    ctrl = _control(g, d, k, horizon=3.0)
    E = ctrl.operator.basis
    init = GaussianState(g.normal(size=d), E @ np.diag(g.uniform(0.1, 1, d)) @ E.T)
    traj = propagate_sequential(init, ctrl)
    m, S = np.array(init.mean), np.array(init.cov)
    for i in range(k):
        F, u, Q = transition_by_quadrature(ctrl.operator.matrix(i), ctrl.offsets[i], ctrl.diffusion, ctrl.grid.deltas[i])
        m, S = F @ m + u, F @ S @ F.T + Q
        assert np.allclose(traj.means_standard()[i + 1], m, atol=1e-10)
        assert np.allclose(traj.cov_standard(i + 1), S, atol=1e-10)


MC_PATHS = 50_000


def family_band(m, per_test=3.0):
    """Band that keeps the chance of any false alarm among ``m`` comparisons at the single 3 SE level."""
    return max(per_test, float(norm.isf(norm.sf(per_test) / m)))


@pytest.mark.parametrize("seed", range(20))
def test_sequential_matches_simulation(seed):
    g = np.random.default_rng(seed)
    d, k = int(g.integers(1, 5)), int(g.integers(1, 9))
    ctrl = _control(g, d, k)
    E = ctrl.operator.basis
    var0 = g.uniform(0.1, 1.0, d)
    init = GaussianState(g.normal(size=d), E @ np.diag(var0) @ E.T)
    traj = propagate_sequential(init, ctrl)
    x0 = init.mean + (g.standard_normal((MC_PATHS, d)) * np.sqrt(var0)) @ E.T
    A = [ctrl.operator.matrix(i) for i in range(k)]
    paths = euler_maruyama(A, ctrl.offsets, ctrl.diffusion, ctrl.grid.times, x0, 2e-3, g)
    # compare in the eigenbasis, where the closed form is diagonal
    xh = paths @ E
    se = xh.std(axis=0, ddof=1) / np.sqrt(MC_PATHS)
    z = np.abs(xh.mean(axis=0) - traj.means) / se
    assert z.max() < family_band(z.size), z.max()
    rel = np.abs(xh.var(axis=0, ddof=1) - traj.variances) / traj.variances
    assert rel.max() < 0.05


def _one_interval(lam, alpha, sigma=1.0, length=1.0):
    op = SpdOperator(np.eye(1), np.array([[lam]]))
    return PiecewiseControl(TimeGrid([0.0, length]), op, np.array([[alpha]]), sigma)


def test_marginal_at_grid_points_is_exact():
    g = np.random.default_rng(5)
    ctrl = _control(g, 2, 4, horizon=2.0)
    traj = propagate_sequential(GaussianState([0.0, 0.0], np.eye(2)), ctrl)
    for i, t in enumerate(ctrl.grid.times):
        st = marginal_at(traj, ctrl, t)
        assert np.array_equal(st.mean, traj.means[i]) and np.array_equal(st.cov, traj.variances[i])


def test_marginal_at_brownian_midpoint():
    ctrl = _one_interval(0.0, 0.0)
    traj = propagate_sequential(GaussianState([0.0], [[1.0]]), ctrl)
    assert marginal_at(traj, ctrl, 0.5).cov[0] == pytest.approx(1.5, abs=1e-15)


def test_marginal_at_partial_worked_interval():
    ctrl = _one_interval(1.0, 1.0)
    traj = propagate_sequential(GaussianState([0.0], [[1.0]]), ctrl)
    assert marginal_at(traj, ctrl, 0.3).mean[0] == pytest.approx(0.2591817793182821, abs=1e-14)


def test_marginal_at_outside_horizon():
    ctrl = _one_interval(1.0, 1.0)
    traj = propagate_sequential(GaussianState([0.0], [[1.0]]), ctrl)
    with pytest.raises(ValueError):
        marginal_at(traj, ctrl, 1.01)


def test_marginal_uses_left_interval_control():
    op = SpdOperator(np.eye(1), np.array([[0.0], [0.0]]))
    ctrl = PiecewiseControl(TimeGrid([0.0, 1.0, 2.0]), op, np.array([[1.0], [-5.0]]))
    traj = propagate_sequential(GaussianState([0.0], [[0.0]]), ctrl)
    assert marginal_at(traj, ctrl, 0.5).mean[0] == pytest.approx(0.5)
    assert marginal_at(traj, ctrl, 1.5).mean[0] == pytest.approx(1.0 - 2.5)


def test_degenerate_samples_equal_means():
    ctrl = PiecewiseControl(TimeGrid([0.0, 1.0]), SpdOperator(np.eye(2), np.ones((1, 2))), np.ones((1, 2)), 1.0)
    traj = propagate_sequential(GaussianState([1.0, 2.0], np.zeros((2, 2))), ctrl)
    zero = type(traj)(traj.grid, traj.means, np.zeros_like(traj.variances), traj.operator)
    x = sample_marginals(zero, RandomStream(0), 3)
    assert np.array_equal(x, np.broadcast_to(zero.means_standard(), x.shape))


def test_sampling_law_of_large_numbers():
    ctrl = _one_interval(1.0, 1.0)
    traj = propagate_sequential(GaussianState([0.0], [[1.0]]), ctrl)
    n = 10**5
    x = sample_marginals(traj, RandomStream(3), n)[:, 1, 0]
    se = np.sqrt(WORKED_VAR / n)
    assert abs(x.mean() - WORKED_MEAN) < 4 * se
    assert abs(x.var() - WORKED_VAR) < 4 * WORKED_VAR * np.sqrt(2.0 / n)


def test_sampling_is_deterministic():
    g = np.random.default_rng(9)
    ctrl = _control(g, 3, 5)
    traj = propagate_sequential(GaussianState(np.zeros(3), np.eye(3)), ctrl)
    a = sample_marginals(traj, RandomStream(11, 2), 7)
    b = sample_marginals(traj, RandomStream(11, 2), 7)
    assert a.tobytes() == b.tobytes()
    with pytest.raises(ValueError):
        sample_marginals(traj, RandomStream(0), 0)
