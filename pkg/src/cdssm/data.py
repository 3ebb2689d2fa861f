"""Synthetic datasets, task protocols, CSV storage and naive baselines."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .lg.kalman import sample_prior_paths
from .lg.model import GaussianEmission, LinearGaussianSSM
from .rng import RandomStream
from .types import GaussianState, ObservationSeq, SpdOperator, TimeGrid

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class Dataset:
    """Aligned input/target sequences with split tags.

    ``inputs[i]`` and ``targets[i]`` share a time grid.  The input mask says
    what a model may read, the target mask what it is scored on.  ``latents``
    holds ground-truth states when the generator knows them.
    """

    inputs: tuple
    targets: tuple
    split: tuple
    meta: dict = field(default_factory=dict)
    latents: tuple | None = None

    def __post_init__(self):
        inputs, targets, split = tuple(self.inputs), tuple(self.targets), tuple(self.split)
        if not (len(inputs) == len(targets) == len(split)):
            raise ValueError("inputs, targets and split tags must have equal length")
        for i, (a, b) in enumerate(zip(inputs, targets)):
            if not np.array_equal(a.grid.times, b.grid.times):
                raise ValueError(f"sequence {i}: input and target grids differ")
        bad = set(split) - set(SPLITS)
        if bad:
            raise ValueError(f"unknown split tags {sorted(bad)}")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "split", split)
        if self.latents is not None:
            object.__setattr__(self, "latents", tuple(self.latents))

    def __len__(self) -> int:
        return len(self.inputs)

    def indices(self, tag: str) -> list[int]:
        return [i for i, s in enumerate(self.split) if s == tag]

    def subset(self, tag: str) -> "Dataset":
        idx = self.indices(tag)
        lat = None if self.latents is None else [self.latents[i] for i in idx]
        return Dataset(
            [self.inputs[i] for i in idx], [self.targets[i] for i in idx], [tag] * len(idx), dict(self.meta), lat
        )

    @property
    def obs_dim(self) -> int:
        return self.inputs[0].dim

    @property
    def target_dim(self) -> int:
        return self.targets[0].dim


# --------------------------------------------------------------------------- splits


def split_counts(n: int, fractions) -> tuple[int, int, int]:
    """Counts per split; rounding leftovers go to train."""
    f = np.asarray(fractions, dtype=np.float64)
    if f.shape != (3,) or np.any(f < 0) or not math.isclose(f.sum(), 1.0, abs_tol=1e-9):
        raise ValueError("split fractions must be three nonnegative numbers summing to 1")
    val, test = int(math.floor(n * f[1])), int(math.floor(n * f[2]))
    return n - val - test, val, test


def assign_splits(n: int, fractions, rng: RandomStream) -> list[str]:
    counts = split_counts(n, fractions)
    tags = np.array(["train"] * counts[0] + ["val"] * counts[1] + ["test"] * counts[2])
    return list(tags[rng.permutation(n)])


# --------------------------------------------------------------------------- protocols


def _keep_rows(n: int, keep_fraction: float, rng: RandomStream) -> np.ndarray:
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError("keep_fraction must be in (0, 1]")
    n_keep = max(1, int(round(keep_fraction * n)))
    return np.sort(rng.choice(n, size=n_keep, replace=False))


def subsample_irregular(seq: ObservationSeq, keep_fraction: float, drop_fraction: float, rng: RandomStream):
    """Keep a uniform subset of timestamps, then mask a fraction of the remaining cells."""
    if not 0.0 <= drop_fraction < 1.0:
        raise ValueError("drop_fraction must be in [0, 1)")
    rows = _keep_rows(len(seq.grid), keep_fraction, rng.child(0))
    mask = seq.mask[rows].copy()
    if drop_fraction > 0:
        mask &= rng.child(1).uniform(size=mask.shape) >= drop_fraction
    if not mask.any():
        raise ValueError("subsampling removed every observation")
    return ObservationSeq(TimeGrid(seq.grid.times[rows]), seq.values[rows], mask, seq.obs_noise)


def hide_timestamps(seq: ObservationSeq, keep_fraction: float, rng: RandomStream) -> ObservationSeq:
    """Same timestamps, but only a random ``keep_fraction`` of rows stay observed."""
    rows = _keep_rows(len(seq.grid), keep_fraction, rng)
    keep = np.zeros(len(seq.grid), dtype=bool)
    keep[rows] = True
    mask = seq.mask & keep[:, None]
    if not mask.any():
        raise ValueError("no observed cell left")
    return ObservationSeq(seq.grid, np.where(mask, seq.values, 0.0), mask, seq.obs_noise)


def cut_at(seq: ObservationSeq, t_cut: float, before: bool) -> ObservationSeq:
    """Mask every row strictly after (``before=True``) or at/before ``t_cut``."""
    rows = seq.grid.times <= t_cut if before else seq.grid.times > t_cut
    mask = seq.mask & rows[:, None]
    return ObservationSeq(seq.grid, np.where(mask, seq.values, 0.0), mask, seq.obs_noise)


def apply_task(full_obs, clean, task: str, rng: RandomStream, keep_fraction: float = 0.5, cut_fraction: float = 0.5):
    """Turn full noisy observations and clean signals into ``(inputs, targets)``.

    * ``interpolate``: a random ``keep_fraction`` of timestamps is visible;
      targets are the noisy observations at every timestamp.
    * ``regress``: as interpolate, but targets are the clean signal.
    * ``extrapolate``: observations up to ``cut_fraction`` of the horizon are
      visible; targets are the noisy observations after it.
    """
    inputs, targets = [], []
    for i, (obs, sig) in enumerate(zip(full_obs, clean)):
        if task in ("interpolate", "regress"):
            inputs.append(hide_timestamps(obs, keep_fraction, rng.child(i)))
            targets.append(obs if task == "interpolate" else sig)
        elif task == "extrapolate":
            t_cut = obs.grid.times[0] + cut_fraction * (obs.grid.horizon - obs.grid.times[0])
            inputs.append(cut_at(obs, t_cut, before=True))
            targets.append(cut_at(obs, t_cut, before=False))
        else:
            raise ValueError(f"unknown task {task!r}")
    return inputs, targets


# --------------------------------------------------------------------------- generators


def lg_system(
    rng: RandomStream,
    latent_dim: int = 2,
    obs_dim: int = 2,
    n_points: int = 50,
    horizon: float = 10.0,
    spectrum_range=(0.2, 1.0),
    offset_scale: float = 1.0,
    diffusion: float = 0.5,
    obs_noise: float = 0.01,
) -> LinearGaussianSSM:
    """A random time-homogeneous system on a regular lattice (no hidden seeds)."""
    from scipy.stats import ortho_group

    g = rng.generator
    d = latent_dim
    E = ortho_group.rvs(d, random_state=g) if d > 1 else np.ones((1, 1))
    lam = g.uniform(*spectrum_range, size=d)
    beta = g.normal(scale=offset_scale, size=d)
    k = n_points - 1
    grid = TimeGrid(np.linspace(0.0, horizon, n_points))
    op = SpdOperator(E, np.tile(lam, (k, 1)))
    # stationary law of the prior as the initial law
    A = (E * lam) @ E.T
    mean = np.linalg.solve(A, beta)
    cov = (E * (diffusion**2 / (2 * lam))) @ E.T
    H = np.eye(d)[:obs_dim] if obs_dim <= d else g.normal(size=(obs_dim, d))
    return LinearGaussianSSM(
        grid, op, np.tile(beta, (k, 1)), diffusion, GaussianState(mean, 0.5 * (cov + cov.T)), GaussianEmission(H, obs_noise)
    )


def gen_lg(ssm: LinearGaussianSSM, n_sequences: int, rng: RandomStream, noiseless: bool = False):
    """Exact prior paths and noisy observations.

    Returns ``(observations, clean_signals, latents)``; ``clean = H x``.
    ``noiseless`` drops the emission noise (the diffusion is taken from ``ssm``).
    """
    H = ssm.emission.matrix
    R = ssm.emission.noise
    obs, clean, lat = [], [], []
    for i in range(n_sequences):
        s = rng.child(i)
        x = sample_prior_paths(ssm, s.child(0).generator, 1)[0]
        sig = x @ H.T
        y = sig if noiseless else sig + s.child(1).normal(sig.shape) * np.sqrt(R)
        full = np.ones(y.shape, dtype=bool)
        obs.append(ObservationSeq(ssm.grid, y, full, None if noiseless else R))
        clean.append(ObservationSeq(ssm.grid, sig, full))
        lat.append(x)
    return obs, clean, lat


PENDULUM_FREQ2 = 1.0  # g / l
PENDULUM_DAMPING = 0.1
PENDULUM_NOISE_STD = 0.05
PENDULUM_TIME_UNIT = 0.1  # physical seconds per timestamp unit
PENDULUM_RK4_STEP = 0.01


def pendulum_rhs(state, freq2=PENDULUM_FREQ2, damping=PENDULUM_DAMPING):
    theta, omega = state[..., 0], state[..., 1]
    return np.stack([omega, -freq2 * np.sin(theta) - damping * omega], axis=-1)


def integrate_pendulum(state0, times, step=PENDULUM_RK4_STEP, freq2=PENDULUM_FREQ2, damping=PENDULUM_DAMPING):
    """RK4 solution at ``times`` (physical units) for initial states ``(n, 2)``.

    Each gap between consecutive output times is split into equal sub-steps
    no longer than ``step``.
    """
    s = np.array(state0, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    out = np.empty((s.shape[0], times.size, 2))
    out[:, 0] = s
    for j in range(1, times.size):
        gap = times[j] - times[j - 1]
        n = max(1, int(math.ceil(gap / step - 1e-12)))
        h = gap / n
        for _ in range(n):
            k1 = pendulum_rhs(s, freq2, damping)
            k2 = pendulum_rhs(s + 0.5 * h * k1, freq2, damping)
            k3 = pendulum_rhs(s + 0.5 * h * k2, freq2, damping)
            k4 = pendulum_rhs(s + h * k3, freq2, damping)
            s = s + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        out[:, j] = s
    return out


def gen_pendulum(
    n_sequences: int,
    rng: RandomStream,
    n_timestamps: int = 50,
    lattice_points: int = 100,
    horizon: float = 100.0,
    damping: float = PENDULUM_DAMPING,
    noise_std: float = PENDULUM_NOISE_STD,
):
    """Damped pendulum observed as noisy ``(sin, cos)`` of the angle.

    Every sequence uses ``n_timestamps`` distinct points of a regular lattice
    on ``[0, horizon]``.  Returns ``(observations, clean_signals, states)``.
    """
    lattice = np.linspace(0.0, horizon, lattice_points)
    init_rng = rng.child(0)
    theta0 = init_rng.uniform(-np.pi / 2, np.pi / 2, n_sequences)
    omega0 = init_rng.uniform(-1.0, 1.0, n_sequences)
    states = integrate_pendulum(np.stack([theta0, omega0], axis=1), lattice * PENDULUM_TIME_UNIT, damping=damping)
    obs, clean, lat = [], [], []
    for i in range(n_sequences):
        s = rng.child(1).child(i)
        rows = np.sort(s.choice(lattice_points, size=n_timestamps, replace=False))
        th = states[i, rows, 0]
        sig = np.stack([np.sin(th), np.cos(th)], axis=1)
        y = sig + noise_std * s.normal(sig.shape)
        grid = TimeGrid(lattice[rows])
        full = np.ones(sig.shape, dtype=bool)
        obs.append(ObservationSeq(grid, y, full, noise_std**2))
        clean.append(ObservationSeq(grid, sig, full))
        lat.append(states[i, rows])
    return obs, clean, lat


def build_dataset(full_obs, clean, latents, task, fractions, rng: RandomStream, meta, keep_fraction=0.5) -> Dataset:
    inputs, targets = apply_task(full_obs, clean, task, rng.child(0), keep_fraction=keep_fraction)
    split = assign_splits(len(inputs), fractions, rng.child(1))
    return Dataset(inputs, targets, split, dict(meta, task=task), latents)


# --------------------------------------------------------------------------- normalization


def minmax_stats(ds: Dataset):
    """Per-coordinate ``(low, high)`` of observed training inputs."""
    vals = [s.values[s.mask.any(axis=1)] for s in ds.subset("train").inputs]
    v = np.concatenate(vals) if vals else np.zeros((1, ds.obs_dim))
    lo, hi = v.min(axis=0), v.max(axis=0)
    return lo, np.where(hi > lo, hi, lo + 1.0)


def normalize(ds: Dataset, stats=None) -> tuple[Dataset, tuple]:
    """Scale inputs and targets to ``[0, 1]`` using training-split input statistics.

    Only meaningful when inputs and targets live in the same space.
    """
    lo, hi = minmax_stats(ds) if stats is None else stats

    def scale(seq):
        v = np.where(seq.mask, (seq.values - lo) / (hi - lo), 0.0)
        return ObservationSeq(seq.grid, v, seq.mask)

    out = Dataset(
        [scale(s) for s in ds.inputs], [scale(s) for s in ds.targets], ds.split, dict(ds.meta, normalized=True), ds.latents
    )
    return out, (lo, hi)


# --------------------------------------------------------------------------- CSV


def _fmt(v) -> str:
    return repr(float(v))


def dumps_csv(seqs) -> str:
    if not seqs:
        raise ValueError("nothing to write")
    m = seqs[0].dim
    header = "t," + ",".join(f"y{j}" for j in range(m)) + "," + ",".join(f"mask{j}" for j in range(m))
    blocks = []
    for seq in seqs:
        if seq.dim != m:
            raise ValueError("all sequences must share the observation dimension")
        rows = []
        for t, v, mk in zip(seq.grid.times, seq.values, seq.mask):
            vals = [_fmt(x) if o else "0.0" for x, o in zip(v, mk)]
            rows.append(",".join([_fmt(t), *vals, *("1" if o else "0" for o in mk)]))
        blocks.append("\n".join(rows))
    return header + "\n" + "\n\n".join(blocks) + "\n"


def loads_csv(text: str) -> list[ObservationSeq]:
    lines = text.split("\n")
    header = lines[0].strip().split(",")
    if len(header) < 3 or header[0] != "t" or (len(header) - 1) % 2:
        raise ValueError("malformed header: expected t,y0,...,mask0,...")
    m = (len(header) - 1) // 2
    if header[1 : 1 + m] != [f"y{j}" for j in range(m)] or header[1 + m :] != [f"mask{j}" for j in range(m)]:
        raise ValueError("malformed header: expected t,y0,...,mask0,...")
    seqs, rows = [], []

    def flush(lineno):
        if not rows:
            return
        arr = np.array(rows)
        t, v, mk = arr[:, 0], arr[:, 1 : 1 + m], arr[:, 1 + m :]
        if np.any(np.diff(t) <= 0):
            raise ValueError(f"sequence ending at line {lineno}: times must be strictly increasing")
        if not np.all(np.isin(mk, (0.0, 1.0))):
            raise ValueError(f"sequence ending at line {lineno}: masks must be 0 or 1")
        mk = mk.astype(bool)
        if np.any(~np.isfinite(v[mk])):
            raise ValueError(f"sequence ending at line {lineno}: non-finite value in an observed cell")
        seqs.append(ObservationSeq(TimeGrid(t), np.where(mk, v, 0.0), mk))
        rows.clear()

    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            flush(lineno)
            continue
        parts = line.split(",")
        if len(parts) != 1 + 2 * m:
            raise ValueError(f"line {lineno}: expected {1 + 2 * m} fields, found {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise ValueError(f"line {lineno}: unparsable number") from None
    flush(len(lines))
    return seqs


def save_csv(path, seqs) -> None:
    Path(path).write_bytes(dumps_csv(seqs).encode("utf-8"))


def load_csv(path) -> list[ObservationSeq]:
    return loads_csv(Path(path).read_bytes().decode("utf-8"))


def save_dataset(directory, ds: Dataset) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_csv(d / "inputs.csv", ds.inputs)
    save_csv(d / "targets.csv", ds.targets)
    info = {"meta": ds.meta, "split": list(ds.split)}
    (d / "dataset.json").write_text(json.dumps(info, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    for name in ("inputs.csv", "targets.csv", "dataset.json"):
        if not (d / name).is_file():
            raise FileNotFoundError(f"dataset file missing: {d / name}")
    info = json.loads((d / "dataset.json").read_text(encoding="utf-8"))
    return Dataset(load_csv(d / "inputs.csv"), load_csv(d / "targets.csv"), info["split"], info.get("meta", {}))


# --------------------------------------------------------------------------- baselines


def locf_predict(inp: ObservationSeq, fallback) -> np.ndarray:
    """Last observation carried forward per coordinate.

    Cells before a coordinate's first observation take that first
    observation; coordinates never observed take ``fallback``.
    """
    k, m = inp.values.shape
    out = np.empty((k, m))
    for j in range(m):
        obs = inp.mask[:, j]
        if not obs.any():
            out[:, j] = fallback[j]
            continue
        pos = np.where(obs, np.arange(k), -1)
        last = np.maximum.accumulate(pos)
        last = np.where(last >= 0, last, np.argmax(obs))
        out[:, j] = inp.values[last, j]
    return out


def target_mean(ds: Dataset) -> np.ndarray:
    """Per-coordinate mean of observed training targets."""
    tr = ds.subset("train")
    num = sum(np.where(s.mask, s.values, 0.0).sum(axis=0) for s in tr.targets)
    den = sum(s.mask.sum(axis=0) for s in tr.targets)
    return np.asarray(num, dtype=np.float64) / np.maximum(den, 1)


def masked_mse(preds, targets) -> float:
    """Mean squared error over all observed target cells of a list of sequences."""
    sse, n = 0.0, 0
    for p, t in zip(preds, targets):
        r = np.where(t.mask, np.asarray(p) - t.values, 0.0)
        sse += float((r * r).sum())
        n += int(t.mask.sum())
    if n == 0:
        raise ValueError("no target cells to score")
    return sse / n


def baselines(ds: Dataset, split: str = "test") -> dict:
    """``locf_mse`` and ``mean_mse`` on one split (the mean comes from the training split)."""
    mu = target_mean(ds)
    part = ds.subset(split)
    if len(part) == 0:
        raise ValueError(f"split {split!r} is empty")
    locf = [locf_predict(i, mu) for i in part.inputs]
    const = [np.broadcast_to(mu, t.values.shape) for t in part.targets]
    return {"locf_mse": masked_mse(locf, part.targets), "mean_mse": masked_mse(const, part.targets)}
