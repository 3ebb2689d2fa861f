"""``key = value`` run configuration with ``[data]``, ``[model]``, ``[train]``, ``[task]`` sections."""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .training import TrainConfig


class ConfigError(ValueError):
    """Invalid or unknown configuration entries."""


DATA_DEFAULTS = {
    "generator": "lg",  # lg | pendulum | csv
    "n_sequences": 400,
    "fractions": "0.6,0.2,0.2",
    "keep_fraction": 0.5,
    "latent_dim": 2,
    "obs_dim": 2,
    "n_points": 50,
    "horizon": 10.0,
    "diffusion": 0.5,
    "obs_noise": 0.01,
    "offset_scale": 1.0,
    "spectrum_low": 0.2,
    "spectrum_high": 1.0,
    "system_seed": 0,
    "normalize": False,
    "path": "",
}

ORACLE_DEFAULTS = {
    "instances": 3,
    "max_dim": 2,
    "intervals": "2,3,5",
    "bridge_paths": 20000,
    "gap_samples": 20000,
    "controls": 3,
    "pde_spacing": 0.05,
    "corrupt_h": False,
}

TASK_DEFAULTS = {"n_paths": 32, "plot": False}

# where each TrainConfig field lives in the file
MODEL_KEYS = (
    "latent_dim",
    "encoded_dim",
    "n_base",
    "n_blocks",
    "scheme",
    "enc_var",
    "dec_var",
    "pot_var",
    "diffusion",
    "n_time_freq",
    "hidden",
    "dropout",
    "potential_on",
    "time_scale",
)
TRAIN_KEYS = tuple(k for k in TrainConfig.field_names() if k not in MODEL_KEYS and k != "task")


def _coerce(value: str, like, key: str):
    try:
        if isinstance(like, bool):
            v = value.strip().lower()
            if v in ("1", "true", "yes", "on"):
                return True
            if v in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(like, int):
            return int(value)
        if isinstance(like, float):
            return float(value)
        return value.strip()
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {type(like).__name__}") from None


@dataclass
class RunConfig:
    data: dict = field(default_factory=lambda: dict(DATA_DEFAULTS))
    train: TrainConfig = field(default_factory=TrainConfig)
    task: dict = field(default_factory=lambda: dict(TASK_DEFAULTS))
    oracle: dict = field(default_factory=lambda: dict(ORACLE_DEFAULTS))

    def with_seed(self, seed: int) -> "RunConfig":
        kw = self.train.to_dict()
        kw["seed"] = int(seed)
        return RunConfig(dict(self.data), TrainConfig(**kw), dict(self.task), dict(self.oracle))

    def dumps(self) -> str:
        tc = self.train.to_dict()
        cp = configparser.ConfigParser(interpolation=None)
        cp["data"] = {k: str(v) for k, v in self.data.items()}
        cp["model"] = {k: str(tc[k]) for k in MODEL_KEYS}
        cp["train"] = {k: str(tc[k]) for k in TRAIN_KEYS}
        cp["task"] = {"task": tc["task"], **{k: str(v) for k, v in self.task.items()}}
        cp["oracle"] = {k: str(v) for k, v in self.oracle.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def parses(text: str, check_paths: bool = True) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0]) from None
    allowed = {"data", "model", "train", "task", "oracle"}
    unknown = sorted(set(cp.sections()) - allowed)
    if unknown:
        raise ConfigError(f"unknown section(s): {unknown}")

    defaults_tc = TrainConfig().to_dict()
    data, task, oracle = dict(DATA_DEFAULTS), dict(TASK_DEFAULTS), dict(ORACLE_DEFAULTS)
    tc = dict(defaults_tc)

    def absorb(section, target, like):
        if not cp.has_section(section):
            return
        for key, raw in cp.items(section):
            if key not in like:
                raise ConfigError(f"unknown key [{section}] {key}")
            target[key] = _coerce(raw, like[key], f"[{section}] {key}")

    absorb("data", data, DATA_DEFAULTS)
    absorb("model", tc, {k: defaults_tc[k] for k in MODEL_KEYS})
    absorb("train", tc, {k: defaults_tc[k] for k in TRAIN_KEYS})
    absorb("task", task, {**TASK_DEFAULTS, "task": ""})
    absorb("oracle", oracle, ORACLE_DEFAULTS)
    if "task" in task:
        tc["task"] = task.pop("task")
    try:
        train = TrainConfig(**tc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if data["generator"] not in ("lg", "pendulum", "csv"):
        raise ConfigError("[data] generator must be lg, pendulum or csv")
    if data["generator"] == "csv":
        if not data["path"]:
            raise ConfigError("[data] path is required for the csv generator")
        if check_paths and not Path(data["path"]).is_dir():
            raise ConfigError(f"[data] path does not exist: {data['path']}")
    try:
        frac = [float(x) for x in str(data["fractions"]).split(",")]
        if len(frac) != 3 or abs(sum(frac) - 1.0) > 1e-9 or min(frac) < 0:
            raise ValueError
    except ValueError:
        raise ConfigError("[data] fractions must be three numbers summing to 1") from None
    if not 0 < data["keep_fraction"] <= 1:
        raise ConfigError("[data] keep_fraction must be in (0, 1]")
    if data["n_sequences"] < 3:
        raise ConfigError("[data] n_sequences must be >= 3")
    if task["n_paths"] < 1:
        raise ConfigError("[task] n_paths must be >= 1")
    return RunConfig(data, train, task, oracle)


def load(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parses(p.read_text(encoding="utf-8"))


PRESETS = ("lg-interp", "lg-extrap", "pendulum-regress", "bridge-demo")


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return resources.files("cdssm.presets").joinpath(f"{name}.cfg").read_text(encoding="utf-8")


def resolve(name_or_path: str) -> RunConfig:
    """A preset name or a path to a config file."""
    if name_or_path in PRESETS:
        return parses(preset_text(name_or_path))
    return load(name_or_path)
