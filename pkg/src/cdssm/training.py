"""Training loop, optimizer, inference and metrics for the amortized model."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .data import Dataset, masked_mse
from .nn import checkpoint as ckpt
from .nn.model import AssimilationConfig, Batch, ControlledLatentModel
from .rng import RandomStream

log = logging.getLogger(__name__)

TASKS = ("regress", "classify", "interpolate", "extrapolate")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 50
    latent_dim: int = 8
    encoded_dim: int = 8
    n_base: int = 4
    n_blocks: int = 2
    time_scale: float = 1.0
    weight_decay: float = 0.0
    grad_clip: float = 0.0
    n_elbo_samples: int = 1
    seed: int = 0
    scheme: str = "full"
    task: str = "interpolate"
    patience: int = 50
    enc_var: float = 0.01
    dec_var: float = 0.01
    pot_var: float = 0.1
    diffusion: float = 1.0
    n_time_freq: int = 4
    hidden: int = 32
    dropout: float = 0.0
    potential_on: str = "mean"
    val_paths: int = 8
    max_batches: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if self.scheme not in ("history", "full"):
            raise ValueError("scheme must be 'history' or 'full'")
        if self.task == "extrapolate" and self.scheme != "history":
            raise ValueError("extrapolation requires the history scheme")
        if self.learning_rate < 0 or not math.isfinite(self.learning_rate):
            raise ValueError("learning_rate must be finite and >= 0")
        for name in ("epochs", "batch_size", "n_elbo_samples", "patience", "val_paths"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.weight_decay < 0 or self.grad_clip < 0 or self.max_batches < 0:
            raise ValueError("weight_decay, grad_clip and max_batches must be >= 0")

    def model_config(self, obs_dim: int, out_dim: int) -> AssimilationConfig:
        return AssimilationConfig(
            obs_dim=obs_dim,
            out_dim=out_dim,
            latent_dim=self.latent_dim,
            encoded_dim=self.encoded_dim,
            n_base=self.n_base,
            n_blocks=self.n_blocks,
            scheme=self.scheme,
            enc_var=self.enc_var,
            dec_var=self.dec_var,
            pot_var=self.pot_var,
            diffusion=self.diffusion,
            time_scale=self.time_scale,
            n_time_freq=self.n_time_freq,
            enc_hidden=self.hidden,
            dec_hidden=self.hidden,
            likelihood="categorical" if self.task == "classify" else "gaussian",
            potential_on=self.potential_on,
            dropout=self.dropout,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


class TrainingDiverged(FloatingPointError):
    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


# --------------------------------------------------------------------------- batching


def make_batch(inputs, targets=None) -> Batch:
    """Pad sequences to a common length; padding repeats the last timestamp."""
    B = len(inputs)
    if B == 0:
        raise ValueError("empty batch")
    T = max(len(s.grid) for s in inputs)
    m = inputs[0].dim
    times = np.zeros((B, T))
    iv, im = np.zeros((B, T, m)), np.zeros((B, T, m), bool)
    valid = np.zeros((B, T), bool)
    mt = targets[0].dim if targets is not None else m
    tv, tm = np.zeros((B, T, mt)), np.zeros((B, T, mt), bool)
    for b, s in enumerate(inputs):
        n = len(s.grid)
        times[b, :n] = s.grid.times
        times[b, n:] = s.grid.times[-1]
        iv[b, :n], im[b, :n] = s.values, s.mask
        valid[b, :n] = True
        if targets is not None:
            tgt = targets[b]
            tv[b, :n], tm[b, :n] = tgt.values, tgt.mask
    return Batch(times, iv, im, tv, tm, valid)


# --------------------------------------------------------------------------- optimizer


class Adam:
    """Adam with decoupled weight decay and optional global-norm clipping."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, clip=0.0):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.weight_decay, self.clip = weight_decay, clip
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> float:
        """Apply one update; returns the pre-clipping global gradient norm."""
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
        scale = self.clip / norm if self.clip > 0 and norm > self.clip else 1.0
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g * scale
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - self.lr * update
        return norm


# --------------------------------------------------------------------------- training


@dataclass
class TrainState:
    model: ControlledLatentModel
    optimizer: Adam
    epoch: int = 0
    best_val: float = math.inf
    best_epoch: int = -1
    bad_epochs: int = 0
    best_params: dict | None = None
    history: list | None = None


def build_model(config: TrainConfig, ds: Dataset) -> ControlledLatentModel:
    out_dim = ds.meta.get("n_classes", ds.target_dim) if config.task == "classify" else ds.target_dim
    mc = config.model_config(ds.obs_dim, out_dim)
    return ControlledLatentModel(mc, RandomStream(config.seed, stream_id=1))


def new_state(config: TrainConfig, ds: Dataset) -> TrainState:
    model = build_model(config, ds)
    opt = Adam(model.parameters(), config.learning_rate, weight_decay=config.weight_decay, clip=config.grad_clip)
    return TrainState(model, opt, history=[])


def batch_loss(model, batch: Batch, rng: RandomStream, n_samples: int = 1):
    """Average of ``n_samples`` independent loss draws."""
    total, parts = None, None
    for s in range(n_samples):
        loss, p = model.forward(batch, rng.child(s))
        total = loss if total is None else total + loss
        parts = p if parts is None else {k: parts[k] + p[k] for k in parts}
    if n_samples > 1:
        total = total * (1.0 / n_samples)
        parts = {k: v / n_samples for k, v in parts.items()}
    return total, parts


def evaluate(model, ds: Dataset, split: str, n_paths: int, rng: RandomStream, batch_size: int = 100) -> float:
    part = ds.subset(split)
    if len(part) == 0:
        raise ValueError(f"split {split!r} is empty")
    preds = infer(model, part.inputs, n_paths, rng, batch_size)["mean"]
    if model.config.likelihood == "categorical":
        return 1.0 - accuracy(preds, part.targets)
    return masked_mse(preds, part.targets)


def train(config: TrainConfig, ds: Dataset, state: TrainState | None = None, log_path=None, checkpoint_path=None):
    """Optimize the amortized objective; keeps the best-validation parameters.

    Resuming from ``state`` (as returned by :func:`load_state`) continues the
    same random streams, so a resumed run repeats the uninterrupted one.
    """
    train_idx = ds.indices("train")
    if not train_idx:
        raise ValueError("no training sequences")
    has_val = bool(ds.indices("val"))
    state = state or new_state(config, ds)
    model, opt = state.model, state.optimizer
    root = RandomStream(config.seed, stream_id=2)
    writer = None
    if log_path is not None:
        fresh = state.epoch == 0 or not Path(log_path).exists()
        fh = open(log_path, "w" if fresh else "a", newline="", encoding="utf-8")
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            writer.writerow(["epoch", "train_loss", "val_metric", "wall_seconds"])
    try:
        while state.epoch < config.epochs:
            t0 = time.perf_counter()
            ep = root.child(state.epoch)
            order = np.array(train_idx)[ep.child(0).permutation(len(train_idx))]
            batches = [order[i : i + config.batch_size] for i in range(0, len(order), config.batch_size)]
            if config.max_batches:
                batches = batches[: config.max_batches]
            losses = []
            model.set_training(True)
            for bi, idx in enumerate(batches):
                batch = make_batch([ds.inputs[i] for i in idx], [ds.targets[i] for i in idx])
                if config.task == "classify":
                    batch.labels = _labels(ds, idx, batch)
                model.zero_grad()
                loss, _ = batch_loss(model, batch, ep.child(1).child(bi), config.n_elbo_samples)
                if not np.isfinite(loss.data):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {state.epoch}, batch {bi}", state.best_params or model.state_dict()
                    )
                loss.backward()
                opt.step()
                losses.append(float(loss.data))
            model.set_training(False)
            train_loss = float(np.mean(losses))
            val = (
                evaluate(model, ds, "val", config.val_paths, ep.child(2), config.batch_size * 2)
                if has_val
                else train_loss
            )
            wall = time.perf_counter() - t0
            state.history.append((state.epoch, train_loss, val, wall))
            if writer is not None:
                writer.writerow([state.epoch, repr(train_loss), repr(val), f"{wall:.3f}"])
                fh.flush()
            log.info("epoch %d loss %.6g val %.6g (%.1fs)", state.epoch, train_loss, val, wall)
            if val < state.best_val:
                state.best_val, state.best_epoch, state.bad_epochs = val, state.epoch, 0
                state.best_params = model.state_dict()
            else:
                state.bad_epochs += 1
            state.epoch += 1
            if checkpoint_path is not None:
                save_state(checkpoint_path, state, config)
            if state.bad_epochs >= config.patience:
                log.info("early stop at epoch %d (best %d)", state.epoch, state.best_epoch)
                break
    finally:
        if writer is not None:
            fh.close()
    if state.best_params is not None:
        model.load_state_dict(state.best_params)
    return state


def _labels(ds, idx, batch):
    labels = np.full(batch.times.shape, -1, dtype=np.int64)
    for b, i in enumerate(idx):
        t = ds.targets[i]
        lab = np.where(t.mask[:, 0], t.values[:, 0], -1).astype(np.int64)
        labels[b, : lab.size] = lab
    return labels


# --------------------------------------------------------------------------- checkpoints


def save_state(path, state: TrainState, config: TrainConfig) -> None:
    tensors = {}
    for k, v in state.model.state_dict().items():
        tensors["param." + k] = v
    names = [k for k, _ in state.model.named_parameters()]
    for k, m, v in zip(names, state.optimizer.m, state.optimizer.v):
        tensors["adam_m." + k] = m
        tensors["adam_v." + k] = v
    if state.best_params is not None:
        for k, v in state.best_params.items():
            tensors["best." + k] = v
    meta = {
        "train_config": config.to_dict(),
        "model_config": state.model.config.to_dict(),
        "epoch": state.epoch,
        "adam_t": state.optimizer.t,
        "best_val": None if not math.isfinite(state.best_val) else state.best_val,
        "best_epoch": state.best_epoch,
        "bad_epochs": state.bad_epochs,
        "history": [list(h) for h in (state.history or [])],
    }
    ckpt.save(path, tensors, meta)


def _section(tensors, prefix):
    return {k[len(prefix) :]: v for k, v in tensors.items() if k.startswith(prefix)}


def load_model(path, expected: AssimilationConfig | None = None) -> ControlledLatentModel:
    """Model with the checkpoint's best (else current) parameters.

    Shape mismatches raise ``ValueError`` naming the offending tensor.
    """
    tensors, meta = ckpt.load(path)
    mc = AssimilationConfig(**meta["model_config"]) if expected is None else expected
    model = ControlledLatentModel(mc, RandomStream(0))
    params = _section(tensors, "best.") or _section(tensors, "param.")
    model.load_state_dict(params)
    return model


def load_state(path, config: TrainConfig) -> TrainState:
    tensors, meta = ckpt.load(path)
    model = ControlledLatentModel(AssimilationConfig(**meta["model_config"]), RandomStream(0))
    model.load_state_dict(_section(tensors, "param."))
    opt = Adam(model.parameters(), config.learning_rate, weight_decay=config.weight_decay, clip=config.grad_clip)
    names = [k for k, _ in model.named_parameters()]
    opt.m = [tensors["adam_m." + k].copy() for k in names]
    opt.v = [tensors["adam_v." + k].copy() for k in names]
    opt.t = int(meta["adam_t"])
    best = _section(tensors, "best.") or None
    bv = meta.get("best_val")
    return TrainState(
        model,
        opt,
        epoch=int(meta["epoch"]),
        best_val=math.inf if bv is None else float(bv),
        best_epoch=int(meta["best_epoch"]),
        bad_epochs=int(meta["bad_epochs"]),
        best_params=best,
        history=[tuple(h) for h in meta.get("history", [])],
    )


# --------------------------------------------------------------------------- inference and metrics


def infer(model, inputs, n_paths: int, rng: RandomStream, batch_size: int = 100, quantiles=(0.05, 0.95)):
    """Per-sequence mean predictions and quantile bands on each input grid."""
    means, lows, highs = [], [], []
    for start in range(0, len(inputs), batch_size):
        chunk = inputs[start : start + batch_size]
        batch = make_batch(chunk)
        mean, q = model.predict(batch, n_paths, rng.child(start), quantiles)
        for b, s in enumerate(chunk):
            n = len(s.grid)
            means.append(mean[b, :n])
            lows.append(q[0, b, :n])
            highs.append(q[-1, b, :n])
    return {"mean": means, "low": lows, "high": highs}


def accuracy(preds, targets) -> float:
    """Per-timestamp accuracy; ``preds`` are class scores, targets hold labels in column 0."""
    hit, n = 0, 0
    for p, t in zip(preds, targets):
        obs = t.mask[:, 0]
        hit += int((np.argmax(p, axis=-1)[obs] == t.values[obs, 0].astype(np.int64)).sum())
        n += int(obs.sum())
    if n == 0:
        raise ValueError("no labeled timestamps to score")
    return hit / n


def metrics(preds, targets, task: str) -> dict:
    if task == "classify":
        return {"accuracy": accuracy(preds, targets)}
    return {"mse": masked_mse(preds, targets)}
