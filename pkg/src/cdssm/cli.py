"""Command-line entry point: ``cdssm {generate,train,infer,run,oracle,bench}``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import data as data_mod
from ._accel import set_workers
from .config import ConfigError, RunConfig, preset_text, resolve, PRESETS
from .rng import RandomStream

log = logging.getLogger("cdssm")


# --------------------------------------------------------------------------- commands


def generate(cfg: RunConfig, out: Path) -> data_mod.Dataset:
    """Build the dataset a config describes and write it to ``out``."""
    dc = cfg.data
    seed = cfg.train.seed
    rng = RandomStream(seed, stream_id=3)
    frac = [float(x) for x in str(dc["fractions"]).split(",")]
    task = cfg.train.task
    if dc["generator"] == "csv":
        ds = data_mod.load_dataset(dc["path"])
    else:
        if dc["generator"] == "pendulum":
            full, clean, lat = data_mod.gen_pendulum(int(dc["n_sequences"]), rng.child(0))
            meta = {"generator": "pendulum"}
        else:
            ssm = data_mod.lg_system(
                RandomStream(int(dc["system_seed"]), stream_id=4),
                latent_dim=int(dc["latent_dim"]),
                obs_dim=int(dc["obs_dim"]),
                n_points=int(dc["n_points"]),
                horizon=float(dc["horizon"]),
                spectrum_range=(float(dc["spectrum_low"]), float(dc["spectrum_high"])),
                offset_scale=float(dc["offset_scale"]),
                diffusion=float(dc["diffusion"]),
                obs_noise=float(dc["obs_noise"]),
            )
            full, clean, lat = data_mod.gen_lg(ssm, int(dc["n_sequences"]), rng.child(0))
            meta = {"generator": "lg", "system_seed": int(dc["system_seed"])}
        meta["seed"] = seed
        ds = data_mod.build_dataset(full, clean, lat, task, frac, rng.child(1), meta, keep_fraction=float(dc["keep_fraction"]))
    if dc["normalize"]:
        ds, _ = data_mod.normalize(ds)
    data_mod.save_dataset(out, ds)
    return ds


def train_cmd(cfg: RunConfig, data_dir: Path, out: Path, resume: bool = False):
    from .training import load_state, train

    ds = data_mod.load_dataset(data_dir)
    out.mkdir(parents=True, exist_ok=True)
    ck = out / "checkpoint.txt"
    state = load_state(ck, cfg.train) if resume and ck.exists() else None
    state = train(cfg.train, ds, state, log_path=out / "train_log.csv", checkpoint_path=ck)
    (out / "config.cfg").write_text(cfg.dumps(), encoding="utf-8")
    return state


def infer_cmd(cfg: RunConfig, data_dir: Path, checkpoint: Path, out: Path, plot: bool = False) -> dict:
    from .training import build_model, infer, load_model, metrics

    t0 = time.perf_counter()
    ds = data_mod.load_dataset(data_dir)
    expected = build_model(cfg.train, ds).config
    model = load_model(checkpoint, expected)
    test = ds.subset("test")
    if len(test) == 0:
        raise ValueError("dataset has no test split")
    preds = infer(model, test.inputs, int(cfg.task["n_paths"]), RandomStream(cfg.train.seed, stream_id=5))
    met = metrics(preds["mean"], test.targets, cfg.train.task)
    out.mkdir(parents=True, exist_ok=True)
    pred_seqs = [
        data_mod.ObservationSeq(s.grid, p, np.ones_like(p, dtype=bool)) for s, p in zip(test.inputs, preds["mean"])
    ]
    data_mod.save_csv(out / "predictions.csv", pred_seqs)
    base = data_mod.baselines(ds, "test") if cfg.train.task != "classify" else {}
    (out / "baselines.json").write_text(json.dumps(base, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    result = {"task": cfg.train.task, "n_test": len(test), "seed": cfg.train.seed, **met}
    result["wall_seconds"] = round(time.perf_counter() - t0, 3)
    (out / "metrics.json").write_text(json.dumps(result, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    if plot:
        _plot(out, test, preds)
    return {**result, **base}


def _plot(out: Path, test, preds, n: int = 4) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib not installed; skipping plots")
        return
    for i in range(min(n, len(test))):
        t = test.targets[i]
        fig, ax = plt.subplots(figsize=(7, 3))
        for j in range(t.dim):
            tm = t.grid.times
            ax.plot(tm, preds["mean"][i][:, j], label=f"pred {j}")
            ax.fill_between(tm, preds["low"][i][:, j], preds["high"][i][:, j], alpha=0.2)
            ax.plot(tm[t.mask[:, j]], t.values[t.mask[:, j], j], ".", label=f"target {j}")
            obs = test.inputs[i].mask[:, j]
            ax.plot(tm[obs], test.inputs[i].values[obs, j], "x", ms=4, label=f"input {j}")
        ax.set_xlabel("t")
        ax.legend(fontsize=6, ncol=3)
        fig.tight_layout()
        fig.savefig(out / f"prediction_{i}.png", dpi=100)
        plt.close(fig)


def oracle_cmd(cfg: RunConfig, quick: bool, corrupt: bool) -> bool:
    from .oracle import run_suite

    settings = dict(cfg.oracle)
    if corrupt:
        settings["corrupt_h"] = True
    results = run_suite(settings, cfg.train.seed, quick=quick)
    for r in results:
        print(r.line())
    return all(r.passed for r in results)


def bench_cmd(K_list, d, workers, out: Path | None, seed: int, repeats: int) -> str:
    from .bench import bench_scan, format_csv

    text = format_csv(bench_scan(K_list, d, workers, RandomStream(seed, stream_id=6), repeats))
    if out is not None:
        out.write_text(text, encoding="utf-8")
    return text


# --------------------------------------------------------------------------- argument parsing


def _int_list(s: str) -> list[int]:
    try:
        vals = [int(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cdssm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True):
        if config:
            sp.add_argument("config", help=f"config file or preset ({', '.join(PRESETS)})")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--workers", type=int, default=1, help="kernel threads (results do not depend on it)")

    sp = sub.add_parser("generate", help="write a dataset directory")
    common(sp)
    sp.add_argument("--out", type=Path, required=True)

    sp = sub.add_parser("train", help="train a model on a dataset directory")
    common(sp)
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--quick", action="store_true", help="cap epochs at 3 and batches per epoch at 4")
    sp.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.txt")

    sp = sub.add_parser("infer", help="predict the test split and write metrics")
    common(sp)
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--plot", action="store_true", help="write prediction plots (needs matplotlib)")

    sp = sub.add_parser("run", help="generate, train and infer in one go")
    common(sp)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--quick", action="store_true")
    sp.add_argument("--plot", action="store_true")

    sp = sub.add_parser("oracle", help="verify the exact linear-Gaussian identities")
    common(sp)
    sp.add_argument("--quick", action="store_true", help="fewer samples, wider tolerances")
    sp.add_argument("--corrupt-h", action="store_true", help="test hook: perturb the h-function used by the bridge check")

    sp = sub.add_parser("bench", help="time the parallel scan against the sequential fold")
    common(sp, config=False)
    sp.add_argument("--K", type=_int_list, default=[1, 16, 256, 4096, 65536])
    sp.add_argument("--d", type=int, default=8)
    sp.add_argument("--workers-list", type=_int_list, default=[1])
    sp.add_argument("--repeats", type=int, default=5)
    sp.add_argument("--out", type=Path, default=None)

    sp = sub.add_parser("preset", help="print a preset config")
    sp.add_argument("name", choices=PRESETS)
    return p


def _load(args) -> RunConfig:
    cfg = resolve(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _quick(cfg: RunConfig) -> RunConfig:
    from .training import TrainConfig

    kw = cfg.train.to_dict()
    kw.update(epochs=min(3, kw["epochs"]), max_batches=4, val_paths=2)
    return RunConfig(dict(cfg.data), TrainConfig(**kw), dict(cfg.task, n_paths=4), dict(cfg.oracle))


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"cdssm: config error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "preset":
            sys.stdout.write(preset_text(args.name))
            return 0
        set_workers(max(1, args.workers))
        if args.command == "bench":
            seed = 0 if args.seed is None else args.seed
            sys.stdout.write(bench_cmd(args.K, args.d, args.workers_list, args.out, seed, args.repeats))
            return 0
        cfg = _load(args)
        if getattr(args, "quick", False) and args.command in ("train", "run"):
            cfg = _quick(cfg)
        if args.command == "generate":
            ds = generate(cfg, args.out)
            print(f"wrote {len(ds)} sequences to {args.out}")
        elif args.command == "train":
            st = train_cmd(cfg, args.data, args.out, args.resume)
            print(f"trained {st.epoch} epochs, best validation {st.best_val:.6g} at epoch {st.best_epoch}")
        elif args.command == "infer":
            res = infer_cmd(cfg, args.data, args.checkpoint, args.out, args.plot)
            print(json.dumps(res, sort_keys=True))
        elif args.command == "run":
            generate(cfg, args.out / "data")
            train_cmd(cfg, args.out / "data", args.out / "model")
            res = infer_cmd(cfg, args.out / "data", args.out / "model" / "checkpoint.txt", args.out / "infer", args.plot)
            print(json.dumps(res, sort_keys=True))
        elif args.command == "oracle":
            ok = oracle_cmd(cfg, args.quick, args.corrupt_h)
            return 0 if ok else 1
        return 0
    except ConfigError as exc:
        print(f"cdssm: config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, FileNotFoundError, FloatingPointError, RuntimeError, AssertionError, OSError) as exc:
        print(f"cdssm: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
