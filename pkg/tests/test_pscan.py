import math

import numpy as np
import pytest
from scipy.stats import ortho_group

from cdssm import _accel
from cdssm.bench import bench_scan, depth_bound, format_csv
from cdssm.moments import local_step, propagate_sequential
from cdssm.pscan import (
    ScanElement,
    build_elements,
    combine,
    moments_via_scan,
    parallel_scan,
    parallel_scan_with_depth,
    scan_affine,
    sequential_scan,
)
from cdssm.rng import RandomStream
from cdssm.types import GaussianState, PiecewiseControl, SpdOperator, TimeGrid

BACKENDS = ["numpy"] + (["numba"] if _accel.NUMBA_ENABLED else [])


def el(a, b):
    return ScanElement(np.atleast_1d(float(a)), np.atleast_1d(float(b)))


def left_fold(scale, offset):
    """Plain Python left fold of affine maps, the oracle for every scan test."""
    a, b = np.ones(scale.shape[1:]), np.zeros(scale.shape[1:])
    out_a, out_b = np.empty_like(scale), np.empty_like(offset)
    for i in range(scale.shape[0]):
        a, b = scale[i] * a, scale[i] * b + offset[i]
        out_a[i], out_b[i] = a, b
    return out_a, out_b


def rel(x, ref):
    return np.max(np.abs(x - ref) / np.maximum(np.abs(ref), 1e-300))


def test_identity_is_neutral():
    x = ScanElement(np.array([0.3, 0.9]), np.array([-1.0, 2.0]))
    for res in (combine(x, ScanElement.identity(2)), combine(ScanElement.identity(2), x)):
        assert np.array_equal(res.scale, x.scale) and np.array_equal(res.offset, x.offset)


def test_scalar_composition():
    ab = combine(el(2, 1), el(3, 2))
    assert (ab.scale[0], ab.offset[0]) == (6.0, 5.0)
    abc = combine(ab, el(5, 3))
    assert (abc.scale[0], abc.offset[0]) == (30.0, 28.0)


def test_combine_dimension_mismatch():
    with pytest.raises(ValueError):
        combine(ScanElement.identity(2), ScanElement.identity(3))


def test_associativity_on_random_triples():
    g = np.random.default_rng(0)
    n = 10_000
    a, b, c = (ScanElement(g.uniform(0, 1, n), g.normal(size=n)) for _ in range(3))
    left = combine(combine(a, b), c)
    right = combine(a, combine(b, c))
    assert np.max(np.abs(left.scale - right.scale)) < 1e-14
    assert np.max(np.abs(left.offset - right.offset)) < 1e-14


@pytest.mark.parametrize("backend", BACKENDS)
def test_scan_worked_list(backend):
    out = parallel_scan([el(2, 1), el(3, 2), el(5, 3)], backend)
    assert [(o.scale[0], o.offset[0]) for o in out] == [(2, 1), (6, 5), (30, 28)]
    single = parallel_scan([el(0.5, 4)], backend)
    assert (single[0].scale[0], single[0].offset[0]) == (0.5, 4)


def test_empty_scan_is_an_error():
    with pytest.raises(ValueError):
        parallel_scan([])


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("K", [1, 2, 3, 7, 64, 1000, 4096])
@pytest.mark.parametrize("d", [1, 5, 32])
def test_scan_equals_fold(backend, K, d):
    g = np.random.default_rng(K * 100 + d)
    # scales near one keep long prefix products away from underflow
    scale = g.uniform(0.995, 1.0, (K, d))
    offset = g.normal(size=(K, d))
    a, b = scan_affine(scale, offset, backend)
    ra, rb = left_fold(scale, offset)
    assert rel(a, ra) < 1e-9
    assert np.max(np.abs(b - rb) / np.maximum(np.abs(rb), 1.0)) < 1e-9


@pytest.mark.parametrize("K", [1, 2, 3, 5, 8, 9, 100, 1023, 1024, 1025, 2**16])
def test_depth_bound(K):
    elems = ScanElement(np.full((K, 1), 0.9), np.ones((K, 1)))
    _, depth = parallel_scan_with_depth(elems, "numpy")
    assert depth <= 2 * math.ceil(math.log2(K)) + 2 if K > 1 else depth <= 2
    assert depth <= depth_bound(K)


def test_depth_bound_all_sizes_up_to_4096():
    for K in range(1, 4097):
        elems = ScanElement(np.ones((K, 1)), np.zeros((K, 1)))
        assert parallel_scan_with_depth(elems, "numpy")[1] <= depth_bound(K)


@pytest.mark.skipif(not _accel.NUMBA_ENABLED, reason="numba disabled")
def test_backends_and_workers_bit_identical():
    g = np.random.default_rng(3)
    elems = ScanElement(g.uniform(0.2, 1.0, (3000, 7)), g.normal(size=(3000, 7)))
    ref = parallel_scan(elems, "numpy")
    for w in (1, 2, 8):
        _accel.set_workers(w)
        out, depth = parallel_scan_with_depth(elems, "numba")
        assert out.scale.tobytes() == ref.scale.tobytes()
        assert out.offset.tobytes() == ref.offset.tobytes()
    _accel.set_workers(1)
    seq_np = sequential_scan(elems, "numpy")
    seq_nb = sequential_scan(elems, "numba")
    assert seq_np.offset.tobytes() == seq_nb.offset.tobytes()


def test_build_elements_worked_values():
    op = SpdOperator(np.eye(1), np.array([[1.0], [0.0], [3.0]]))
    ctrl = PiecewiseControl(TimeGrid([0.0, 1.0, 3.0, 3.0]), op, np.array([[1.0], [3.0], [2.0]]))
    mean, cov = build_elements(ctrl)
    assert mean.scale[0, 0] == pytest.approx(math.exp(-1), abs=1e-16)
    assert mean.offset[0, 0] == pytest.approx(1 - math.exp(-1), abs=1e-16)
    assert cov.scale[0, 0] == pytest.approx(math.exp(-2), abs=1e-16)
    assert cov.offset[0, 0] == pytest.approx((1 - math.exp(-2)) / 2, abs=1e-16)
    assert (mean.scale[1, 0], mean.offset[1, 0]) == (1.0, 6.0)
    # zero-length interval is the identity map
    assert (mean.scale[2, 0], mean.offset[2, 0], cov.scale[2, 0], cov.offset[2, 0]) == (1.0, 0.0, 1.0, 0.0)


def test_elements_match_local_step_coefficients():
    g = np.random.default_rng(4)
    op = SpdOperator(ortho_group.rvs(3, random_state=g), g.uniform(0, 2, (4, 3)))
    ctrl = PiecewiseControl(TimeGrid(np.cumsum(np.r_[0, g.uniform(0.1, 1, 4)])), op, g.normal(size=(4, 3)), 0.7)
    mean, cov = build_elements(ctrl)
    for i in range(4):
        s = GaussianState(np.zeros(3), np.zeros(3), eigen=True)
        st = local_step(s, op.spectra[i], ctrl.offsets_eigen()[i], ctrl.grid.deltas[i], 0.7)
        assert np.allclose(mean.offset[i], st.mean, rtol=1e-14, atol=0)
        assert np.allclose(cov.offset[i], st.cov, rtol=1e-14, atol=0)


def _random_problem(g, K, d):
    times = np.concatenate([[0.0], np.cumsum(g.uniform(0.0, 0.01, K))])
    E = ortho_group.rvs(d, random_state=g) if d > 1 else np.eye(1)
    op = SpdOperator(E, g.uniform(0, 3, (K, d)))
    ctrl = PiecewiseControl(TimeGrid(times), op, g.normal(size=(K, d)), g.uniform(0.5, 2))
    init = GaussianState(g.normal(size=d), E @ np.diag(g.uniform(0.1, 1, d)) @ E.T)
    return init, ctrl


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("K,d", [(1, 1), (5, 3), (100, 4), (4096, 16)])
def test_moments_via_scan_equals_sequential(backend, K, d):
    init, ctrl = _random_problem(np.random.default_rng(K + d), K, d)
    a = moments_via_scan(init, ctrl, backend)
    b = propagate_sequential(init, ctrl)
    assert np.max(np.abs(a.means - b.means) / np.maximum(np.abs(b.means), 1.0)) < 1e-9
    assert rel(a.variances, b.variances) < 1e-9


def test_identity_elements_leave_init_constant():
    K, d = 6, 2
    ctrl = PiecewiseControl(TimeGrid(np.zeros(K + 1)), SpdOperator(np.eye(d), np.ones((K, d))), np.ones((K, d)))
    traj = moments_via_scan(GaussianState([1.0, 2.0], np.diag([0.3, 0.4])), ctrl)
    assert np.array_equal(traj.means, np.tile([1.0, 2.0], (K + 1, 1)))
    assert np.array_equal(traj.variances, np.tile([0.3, 0.4], (K + 1, 1)))


def test_scan_dimension_mismatch():
    _, ctrl = _random_problem(np.random.default_rng(0), 3, 2)
    with pytest.raises(ValueError):
        moments_via_scan(GaussianState([0.0], [[1.0]]), ctrl)


def test_bench_rows_and_csv():
    rows = bench_scan([1, 16, 300], 3, [1, 2], RandomStream(0, 6), repeats=1)
    assert len(rows) == 6
    text = format_csv(rows)
    head, *body = text.strip().split("\n")
    assert head == "K,d,workers,sequential_ns,parallel_ns,combine_depth"
    for line in body:
        K, d, w, s, p, depth = line.split(",")
        assert int(s) > 0 and int(p) > 0
        assert int(depth) <= depth_bound(int(K))


def test_backend_benchmark_script_runs(capsys):
    import importlib.util
    from pathlib import Path

    path = Path(__file__).resolve().parents[1] / "benchmarks" / "bench_backends.py"
    spec = importlib.util.spec_from_file_location("bench_backends", path)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    mod.main(["--K", "4,64", "--d", "2", "--paths", "16", "--steps", "10", "--repeats", "1"])
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == mod.HEADER
    assert {line.split(",")[0] for line in lines[1:]} == {"scan", "euler-maruyama"}
