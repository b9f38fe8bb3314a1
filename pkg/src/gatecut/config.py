"""Run configuration files: flat INI with sections mirroring the module
names ([data], [model], [train], [odelab], [verify]). Unknown sections or
keys are hard errors, so typos fail fast instead of silently using
defaults.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields

from .trainer import Hyperparams, W_SCHEDULES


class ConfigError(ValueError):
    pass


DATA_KINDS = ("teacher", "blobs", "spirals", "idx")

_DATA_KEYS = {
    "kind",
    "n",
    "test_fraction",
    "seed",
    "noise",
    "teacher_arch",
    "teacher_in",
    "teacher_hidden",
    "teacher_out",
    "teacher_blocks",
    "teacher_seed",
    "classes",
    "separation",
    "dim",
    "turns",
    "images",
    "labels",
    "test_images",
    "test_labels",
}
_MODEL_KEYS = {"arch"}
_TRAIN_KEYS = {
    "nu",
    "alpha",
    "beta",
    "lambda",
    "theta_tol",
    "batch_size",
    "epochs",
    "w_lr",
    "w_momentum",
    "w_schedule",
    "w_milestones",
    "w_decay_factor",
    "w_restart_period",
    "theta_lr",
    "theta_beta1",
    "theta_beta2",
    "theta_eps",
    "theta_init",
    "finalize_epoch",
    "seed",
    "init_scale",
    "plots",
}
_ODELAB_KEYS = {
    "in",
    "hidden",
    "out",
    "activation",
    "n",
    "noise",
    "data_seed",
    "weight_seed",
    "nu",
    "alpha",
    "beta",
    "lambda",
    "samples",
    "sample_scale",
    "trials",
    "dt",
    "t_end",
    "tol",
    "method",
    "which",
    "dt_halving",
    "seed",
}
_VERIFY_KEYS = {"seed"}

_SECTIONS = {
    "data": _DATA_KEYS,
    "model": _MODEL_KEYS,
    "train": _TRAIN_KEYS,
    "odelab": _ODELAB_KEYS,
    "verify": _VERIFY_KEYS,
}


@dataclass
class DataConfig:
    kind: str = "teacher"
    n: int = 1000
    test_fraction: float = 0.2
    seed: int = 0
    noise: float = 0.01
    teacher_arch: str | None = None
    teacher_in: int = 4
    teacher_hidden: int = 3
    teacher_out: int = 1
    teacher_blocks: int = 3
    teacher_seed: int = 12345
    classes: int = 3
    separation: float = 4.0
    dim: int = 2
    turns: float = 1.5
    images: str | None = None
    labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None


@dataclass
class OdelabConfig:
    in_width: int = 3
    hidden: int = 2
    out_width: int = 2
    activation: str = "softplus"
    n: int = 40
    noise: float = 0.3
    data_seed: int = 5
    weight_seed: int = 5
    nu: float = 0.3
    alpha: float = 0.2
    beta: float = 0.5
    lam: float = 1.0
    samples: int = 200
    sample_scale: float = 1.0
    trials: int = 100
    dt: float = 1e-2
    t_end: float = 10.0
    tol: float = 1e-3
    method: str = "rk4"
    which: str = "both"
    dt_halving: bool = False
    seed: int = 0


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    arch: str | None = None
    hyper: Hyperparams = field(default_factory=Hyperparams)
    plots: bool = False
    odelab: OdelabConfig = field(default_factory=OdelabConfig)
    verify_seed: int = 0
    digest: str = ""


def _convert(section: str, key: str, raw: str, target_type):
    try:
        if target_type is bool:
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError
            return low == "true"
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(
            f"[{section}] {key}: cannot parse {raw!r} as {target_type.__name__}"
        ) from None


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), strict=True)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    for section in cp.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key in cp[section]:
            if key not in _SECTIONS[section]:
                raise ConfigError(f"[{section}]: unknown key {key!r}")

    cfg = RunConfig()
    cfg.digest = hashlib.sha256(text.encode()).hexdigest()[:16]

    if "data" in cp:
        sec = cp["data"]
        type_map = {f.name: f.type for f in fields(DataConfig)}
        for key, raw in sec.items():
            t = {"int": int, "float": float, "str": str, "str | None": str}[
                str(type_map[key])
            ]
            setattr(cfg.data, key, _convert("data", key, raw, t))
        if cfg.data.kind not in DATA_KINDS:
            raise ConfigError(f"[data] kind: unknown kind {cfg.data.kind!r}")

    if "model" in cp:
        cfg.arch = cp["model"].get("arch")

    if "train" in cp:
        sec = cp["train"]
        for key, raw in sec.items():
            if key == "plots":
                cfg.plots = _convert("train", key, raw, bool)
            elif key == "lambda":
                cfg.hyper.lam = _convert("train", key, raw, float)
            elif key == "w_milestones":
                try:
                    cfg.hyper.w_milestones = tuple(
                        int(v) for v in raw.split(",") if v.strip()
                    )
                except ValueError:
                    raise ConfigError("[train] w_milestones: expected integers") from None
            elif key == "finalize_epoch":
                cfg.hyper.finalize_epoch = (
                    None if raw.lower() == "none" else _convert("train", key, raw, int)
                )
            elif key == "w_schedule":
                if raw not in W_SCHEDULES:
                    raise ConfigError(f"[train] w_schedule: unknown schedule {raw!r}")
                cfg.hyper.w_schedule = raw
            else:
                current = getattr(cfg.hyper, key)
                t = int if isinstance(current, int) and not isinstance(current, bool) else float
                setattr(cfg.hyper, key, _convert("train", key, raw, t))
        cfg.hyper.validate()

    if "odelab" in cp:
        sec = cp["odelab"]
        rename = {"in": "in_width", "out": "out_width", "lambda": "lam"}
        for key, raw in sec.items():
            attr = rename.get(key, key)
            current = getattr(cfg.odelab, attr)
            if isinstance(current, bool):
                t = bool
            elif isinstance(current, int):
                t = int
            elif isinstance(current, float):
                t = float
            else:
                t = str
            setattr(cfg.odelab, attr, _convert("odelab", key, raw, t))
        if cfg.odelab.which not in ("B", "U", "both"):
            raise ConfigError(f"[odelab] which: expected B, U or both")
        if cfg.odelab.method not in ("euler", "rk4"):
            raise ConfigError(f"[odelab] method: unknown method {cfg.odelab.method!r}")

    if "verify" in cp:
        cfg.verify_seed = _convert("verify", "seed", cp["verify"].get("seed", "0"), int)
    return cfg


def load_config(path: str) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    return parse_config(text, source=path)
