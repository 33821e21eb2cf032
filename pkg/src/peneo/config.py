"""Run configuration: a flat ``key = value`` file plus command-line overrides.

Resolution order: dataclass defaults, then the named ``preset``, then the
file, then ``--set key=value`` flags and the dedicated flags (``--seed`` ...).
Lines starting with ``#`` are comments. Lists are comma separated.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from .decoder import LossConfig
from .model import ModelConfig
from .numerics import ConfigurationError
from .training import TrainConfig

PRESETS: dict[str, dict[str, Any]] = {
    # toy-scale defaults
    "desk": {},
    # faster convergence on the synthetic corpus (higher lr, page-shift augmentation)
    "synthetic": {"lr_encoder": 3e-3, "lr_decoder": 3e-3, "augment_shift": 0.1},
    # full-scale fine-tuning schedule for a pre-trained backbone
    "full": {"lr_encoder": 2e-6, "lr_decoder": 1e-4, "epochs": 650},
}


@dataclass
class RunConfig:
    pipeline: str = "peneo"
    preset: str = "desk"
    # data
    train: str = ""
    valid: str = ""
    test: str = ""
    checkpoint: str = ""
    features: str = ""
    out: str = "run"
    seed: int = 0
    threads: int = 1
    # optimisation
    epochs: int = 100
    batch_size: int = 4
    lr_encoder: float = 1e-3
    lr_decoder: float = 1e-3
    weight_decay: float = 0.01
    warmup_ratio: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    grad_clip: float = 5.0
    augment_shift: float = 0.0
    eval_every: int = 10
    n_max: int = 512
    # loss
    lambdas: tuple = (1.0, 1.0, 1.0, 1.0, 1.0)
    class_weights: tuple = (1.0, 10.0)
    # model
    c_e: int = 64
    layers: int = 2
    heads: int = 2
    coord_buckets: int = 64
    ffn_mult: int = 2
    c_d: int = 0  # 0 means c_e // 2
    block_rows: int = 64
    layout_init: str = "sinusoidal"

    def __post_init__(self):
        if self.pipeline not in ("peneo", "serre"):
            raise ConfigurationError(f"field 'pipeline': expected peneo or serre, got {self.pipeline!r}")
        if self.preset not in PRESETS:
            raise ConfigurationError(f"field 'preset': unknown preset {self.preset!r} (known: {', '.join(PRESETS)})")
        for name in ("epochs", "batch_size", "threads", "eval_every", "n_max", "c_e", "heads", "coord_buckets"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"field {name!r}: must be >= 1")
        for name in ("lr_encoder", "lr_decoder", "weight_decay", "grad_clip", "augment_shift", "c_d"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"field {name!r}: must be >= 0")
        if not 0 <= self.warmup_ratio <= 1:
            raise ConfigurationError("field 'warmup_ratio': must lie in [0, 1]")
        try:
            self.loss_config()
            self.model_config()
        except ConfigurationError as exc:
            raise ConfigurationError(f"model/loss fields: {exc}") from None

    def model_config(self) -> ModelConfig:
        cfg = ModelConfig(self.c_e, self.layers, self.heads, self.coord_buckets, self.ffn_mult,
                          self.c_d or None, self.block_rows, self.layout_init)
        if self.c_e % self.heads:
            raise ConfigurationError(f"c_e={self.c_e} is not divisible by heads={self.heads}")
        return cfg

    def loss_config(self) -> LossConfig:
        return LossConfig(self.lambdas, self.class_weights)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr_encoder=self.lr_encoder,
            lr_decoder=self.lr_decoder, weight_decay=self.weight_decay, warmup_ratio=self.warmup_ratio,
            beta1=self.beta1, beta2=self.beta2, epsilon=self.epsilon, grad_clip=self.grad_clip,
            augment_shift=self.augment_shift, eval_every=self.eval_every, seed=self.seed,
            n_max=self.n_max, loss=self.loss_config(),
        )

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    def experiment_dict(self) -> dict:
        """Fields that can change results (output location and thread count excluded)."""
        d = self.to_dict()
        for k in ("out", "threads"):
            d.pop(k)
        return d

    def dumps(self) -> str:
        lines = []
        for k, v in self.to_dict().items():
            if isinstance(v, list):
                v = ",".join(repr(x) for x in v)
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _convert(name: str, raw: str) -> Any:
    default = _FIELDS[name].default
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigurationError(f"field {name!r}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for no, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{no}: expected key = value, got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigurationError(f"{source}:{no}: unknown field {key!r}")
        out[key] = value
    return out


def resolve_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Build a :class:`RunConfig` from an optional file and overrides."""
    raw: dict[str, Any] = {}
    if path:
        p = Path(path)
        try:
            raw.update(parse_config_text(p.read_text(encoding="utf-8"), str(p)))
        except FileNotFoundError:
            raise ConfigurationError(f"config file {p} not found") from None
    for k, v in (overrides or {}).items():
        if k not in _FIELDS:
            raise ConfigurationError(f"unknown field {k!r}")
        raw[k] = v
    preset = str(raw.get("preset", RunConfig.preset))
    if preset not in PRESETS:
        raise ConfigurationError(f"field 'preset': unknown preset {preset!r} (known: {', '.join(PRESETS)})")
    values: dict[str, Any] = dict(PRESETS[preset])
    for k, v in raw.items():
        values[k] = _convert(k, v) if isinstance(v, str) else v
    return RunConfig(**values)
