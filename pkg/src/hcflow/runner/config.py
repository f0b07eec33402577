"""Training configuration and its ``key = value`` text format.

One setting per line, ``#`` starts a comment. Keys are the fields of
:class:`TrainConfig` plus the model keys of :class:`HCFlowConfig` and
``lambda1``..``lambda4``. Missing keys take task-dependent defaults.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from ..errors import ConfigError
from ..model import HCFlowConfig
from ..objective import LossWeights

SEED_ENV = "HCFLOW_SEED"

DEFAULT_MILESTONES = {
    "sr": (0.5, 0.75, 0.9, 0.95),
    "rescale": (0.2, 0.4, 0.6, 0.8),
}


@dataclass
class TrainConfig:
    task: str = "sr"
    total_steps: int = 2000
    base_lr: float = 2.5e-4
    milestones: tuple[float, ...] = DEFAULT_MILESTONES["sr"]
    batch: int = 8
    hr_patch: int = 32
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights.sr)
    model: HCFlowConfig = field(default_factory=HCFlowConfig)
    train_dir: str = ""
    val_dir: str = ""
    data_seed: int = 1
    n_train: int = 200
    n_val: int = 20
    augment: bool = True
    log_interval: int = 100
    val_interval: int = 500
    ckpt_interval: int = 500
    grad_clip: float = 0.0
    init_ckpt: str = ""

    def __post_init__(self):
        self.milestones = tuple(float(m) for m in self.milestones)
        self.validate()

    def validate(self):
        if self.task not in DEFAULT_MILESTONES:
            raise ConfigError(f"task must be 'sr' or 'rescale', got {self.task!r}")
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        if not self.base_lr > 0:
            raise ConfigError("base_lr must be positive")
        ms = self.milestones
        if any(not 0 < m < 1 for m in ms) or any(b <= a for a, b in zip(ms, ms[1:])):
            raise ConfigError(f"milestones must be strictly increasing in (0, 1): {ms}")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")
        if self.hr_patch % self.model.scale_factor:
            raise ConfigError(
                f"hr_patch {self.hr_patch} not divisible by scale {self.model.scale_factor}")
        self.weights.validate(self.task)
        self.model.validate()

    def learning_rate(self, step: int) -> float:
        """``base_lr * 2 ** -(number of milestones <= step / total_steps)``."""
        passed = sum(1 for m in self.milestones if step / self.total_steps >= m)
        return self.base_lr * 0.5 ** passed

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            if f.name in ("weights", "model"):
                continue
            lines.append(f"{f.name} = {_fmt(getattr(self, f.name))}")
        for i, w in enumerate(self.weights.as_tuple(), 1):
            lines.append(f"lambda{i} = {w!r}")
        for k, v in self.model.to_dict().items():
            lines.append(f"{k} = {_fmt(v)}")
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(repr(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_bool(s: str) -> bool:
    s = s.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _coerce(kind, raw: str):
    if kind is bool:
        return _parse_bool(raw)
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind == "floats":
        return tuple(float(p) for p in raw.replace(",", " ").split())
    return raw


_TRAIN_KINDS = {
    "task": str, "total_steps": int, "base_lr": float, "milestones": "floats",
    "batch": int, "hr_patch": int, "seed": int, "train_dir": str, "val_dir": str,
    "data_seed": int, "n_train": int, "n_val": int, "augment": bool,
    "log_interval": int, "val_interval": int, "ckpt_interval": int,
    "grad_clip": float, "init_ckpt": str,
}
_MODEL_KINDS = {
    "levels": int, "flow_steps": int, "cond_flow_steps": int, "conditioning": str,
    "squeeze": str, "use_1x1_conv": bool, "conv_init": str, "cond_width": int,
    "cond_blocks": int, "coupling_hidden": int, "lr_sigma": float,
    "in_channels": int, "lr_channels": int,
}
_WEIGHT_KEYS = ("lambda1", "lambda2", "lambda3", "lambda4")


def parse_pairs(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        out[key] = value
    return out


def model_config_from_pairs(pairs: dict[str, str]) -> HCFlowConfig:
    kw = {}
    for k, v in pairs.items():
        if k in _MODEL_KINDS:
            try:
                kw[k] = _coerce(_MODEL_KINDS[k], v)
            except ValueError as exc:
                raise ConfigError(f"bad value for {k}: {exc}") from exc
    return HCFlowConfig(**kw)


def config_from_text(text: str) -> TrainConfig:
    pairs = parse_pairs(text)
    known = set(_TRAIN_KINDS) | set(_MODEL_KINDS) | set(_WEIGHT_KEYS)
    unknown = sorted(set(pairs) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    train_kw = {}
    for k, v in pairs.items():
        if k in _TRAIN_KINDS:
            try:
                train_kw[k] = _coerce(_TRAIN_KINDS[k], v)
            except ValueError as exc:
                raise ConfigError(f"bad value for {k}: {exc}") from exc
    task = train_kw.get("task", "sr")
    if task not in DEFAULT_MILESTONES:
        raise ConfigError(f"task must be 'sr' or 'rescale', got {task!r}")
    train_kw.setdefault("milestones", DEFAULT_MILESTONES[task])
    weights = LossWeights.sr() if task == "sr" else LossWeights.rescaling()
    for i, k in enumerate(_WEIGHT_KEYS):
        if k in pairs:
            vals = list(weights.as_tuple())
            vals[i] = float(pairs[k])
            weights = LossWeights(*vals)
    model_pairs = {k: v for k, v in pairs.items() if k in _MODEL_KINDS}
    if task == "rescale":
        model_pairs.setdefault("squeeze", "haar")
        model_pairs.setdefault("use_1x1_conv", "false")
    return TrainConfig(weights=weights, model=model_config_from_pairs(model_pairs), **train_kw)


def load_config(path, env: dict | None = None) -> TrainConfig:
    """Read a config file; ``HCFLOW_SEED`` in the environment overrides ``seed``."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = config_from_text(text)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            cfg.seed = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer") from exc
    return cfg
