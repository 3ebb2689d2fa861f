"""Verification suite against the exact linear-Gaussian solution.

Each check returns a :class:`CheckResult`; ``run_suite`` strings them
together for the ``oracle`` command.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .lg.hfunc import AffineControl, HQuadratic, h_function
from .lg.kalman import rts_smoother
from .lg.model import GaussianEmission, LinearGaussianSSM, random_ssm
from .lg.pde import hjb_residual_check
from .lg.sde import bridge_schedule, simulate_affine
from .rng import RandomStream
from .soc import bound_gap
from .types import GaussianState, ObservationSeq, PiecewiseControl, SpdOperator, TimeGrid


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


def corrupt(h: HQuadratic, factor: float = 1.5) -> HQuadratic:
    """Fault injection: scale the look-ahead precision and linear terms."""
    return replace(h, P_end=h.P_end * factor, q_end=h.q_end * factor)


def bridge_vs_smoother(ssm, obs, n_paths, rng: RandomStream, dt=None, h=None):
    """Simulate the conditioned SDE from the reweighted initial law; compare with RTS marginals.

    Returns ``(worst_z, worst_var_rel)``: the largest mean deviation in
    standard errors and the largest relative variance error.
    """
    h = h_function(ssm, obs) if h is None else h
    if dt is None:
        dt = 1e-3 * float(ssm.grid.deltas.min())
    init = h.conditioned_init()
    w, V = np.linalg.eigh(np.asarray(init.cov))
    x0 = init.mean + rng.child(0).normal((n_paths, ssm.dim)) @ (V * np.sqrt(np.clip(w, 0, None))).T
    gains, offsets, sizes, record, _ = bridge_schedule(h, ssm.grid.times, dt)
    paths = simulate_affine(gains, offsets, sizes, record, ssm.diffusion, x0, rng.child(1))
    smooth = rts_smoother(ssm, obs)
    worst_z, worst_v = 0.0, 0.0
    for i, st in enumerate(smooth):
        x = paths[:, i]
        se = x.std(axis=0, ddof=1) / math.sqrt(n_paths)
        z = np.abs(x.mean(axis=0) - st.mean) / np.maximum(se, 1e-300)
        worst_z = max(worst_z, float(z.max()))
        var_true = np.diag(np.asarray(st.cov))
        worst_v = max(worst_v, float(np.max(np.abs(x.var(axis=0, ddof=1) - var_true) / var_true)))
    return worst_z, worst_v


def random_piecewise_control(ssm: LinearGaussianSSM, rng: RandomStream, scale: float = 0.5) -> PiecewiseControl:
    """Prior operator with randomly perturbed offsets."""
    offsets = ssm.offsets + scale * rng.normal(ssm.offsets.shape)
    return PiecewiseControl(ssm.grid, ssm.operator, offsets, ssm.diffusion)


def static_case():
    """1D, prior N(0, 1), one observation y = 0 with unit noise, zero-length horizon."""
    grid = TimeGrid([0.0])
    ssm = LinearGaussianSSM(
        grid, SpdOperator(np.ones((1, 1)), np.zeros((0, 1))), np.zeros((0, 1)), 1.0,
        GaussianState([0.0], [[1.0]]), GaussianEmission.identity(1, 1.0),
    )
    return ssm, ObservationSeq(grid, [[0.0]], [[True]])


STATIC_GAP = 0.5 * (1.0 / 0.5 - 1.0 + math.log(0.5))  # KL(N(0,1) || N(0,1/2))


def run_suite(settings: dict, seed: int, quick: bool = False):
    """All oracle checks; ``settings`` holds the ``[oracle]`` config section."""
    root = RandomStream(seed, stream_id=7)
    n_inst = int(settings["instances"])
    max_dim = int(settings["max_dim"])
    ks = [int(k) for k in str(settings["intervals"]).split(",")]
    bridge_paths = int(settings["bridge_paths"])
    gap_samples = int(settings["gap_samples"])
    n_controls = int(settings["controls"])
    n_se = 3.0
    var_tol = 0.05
    if quick:
        bridge_paths, gap_samples = max(2000, bridge_paths // 5), max(2000, gap_samples // 5)
        n_inst, n_controls = max(1, n_inst // 2), max(1, n_controls // 2)
        n_se, var_tol = 4.0, 0.1
    results = []

    instances = []
    for i in range(n_inst):
        g = root.child(0).child(i).generator
        d = 1 + (i % max_dim)
        ssm, obs = random_ssm(g, d, ks[i % len(ks)], interval_range=(0.5, 1.0), aligned_init=True)
        instances.append((ssm, obs))

    zs, vs = [], []
    for i, (ssm, obs) in enumerate(instances):
        h = h_function(ssm, obs)
        if settings.get("corrupt_h"):
            h = corrupt(h)
        z, v = bridge_vs_smoother(ssm, obs, bridge_paths, root.child(1).child(i), h=h)
        zs.append(z)
        vs.append(v)
    results.append(
        CheckResult(
            "bridge-vs-smoother",
            max(zs) <= n_se and max(vs) <= var_tol,
            f"worst mean deviation {max(zs):.2f} SE (limit {n_se}), worst variance error {max(vs):.3f} (limit {var_tol})",
        )
    )

    worst = math.inf
    for i, (ssm, obs) in enumerate(instances):
        for c in range(n_controls):
            ctrl = random_piecewise_control(ssm, root.child(2).child(i).child(c))
            gap, _, est, _ = bound_gap(ctrl, ssm, obs, gap_samples, root.child(3).child(i).child(c))
            worst = min(worst, gap / est.std_error)
    results.append(CheckResult("bound-nonnegative", worst >= -n_se, f"smallest gap {worst:.2f} SE (limit -{n_se})"))

    ok, parts = True, []
    for i, (ssm, obs) in enumerate(instances):
        ctrl = AffineControl(h_function(ssm, obs))
        gap, _, est, log_z = bound_gap(ctrl, ssm, obs, gap_samples, root.child(4).child(i))
        tol = max(0.02 * abs(log_z), n_se * est.std_error)
        ok &= abs(gap) <= tol
        parts.append(f"{gap:+.4f}/{tol:.4f}")
    results.append(CheckResult("optimal-control-tight", ok, "gap/limit " + " ".join(parts)))

    ssm, obs = static_case()
    gap, _, est, _ = bound_gap(PiecewiseControl(ssm.grid, ssm.operator, ssm.offsets, 1.0), ssm, obs, gap_samples, root.child(5))
    results.append(
        CheckResult(
            "static-gap",
            abs(gap - STATIC_GAP) <= n_se * est.std_error,
            f"gap {gap:.5f} +- {est.std_error:.5f}, analytic {STATIC_GAP:.5f}",
        )
    )

    spacing = float(settings["pde_spacing"])
    lo, hi = 4.0 - 0.5, 4.0 + 0.5
    ratios = []
    for i, (ssm, obs) in enumerate(instances):
        if ssm.dim != 1:
            continue
        rep = hjb_residual_check(ssm, obs, spacing, levels=3)
        ratios.extend(rep.h_ratios.tolist() + rep.hjb_ratios.tolist())
    if ratios:
        results.append(
            CheckResult(
                "hopf-cole-residuals",
                all(lo <= r <= hi for r in ratios),
                "ratios " + " ".join(f"{r:.2f}" for r in ratios),
            )
        )
    return results
