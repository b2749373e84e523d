"""Configuration tree for models, losses and training.

The JSON config file mirrors the dataclass nesting::

    {"lvm": {"backend": "toy", "seed": 0, "embed_dim": 64},
     "moe": {"num_experts": 10}, "train": {"max_iters": 500}, ...}

Missing keys take the desk-scale defaults below; unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from lavide.errors import ConfigError

PROMPT_CHOICES = ("ensemble", "P1", "P2", "P3", "P4", "P5", "P6", "P7")


@dataclass
class LvmConfig:
    backend: str = "toy"
    seed: int = 0
    embed_dim: int = 64
    # "module:attr" of a zero-argument factory, used when backend == "external"
    factory: str | None = None

    def validate(self):
        if self.backend not in ("toy", "external"):
            raise ConfigError(f"lvm.backend must be 'toy' or 'external', got {self.backend!r}")
        if self.embed_dim < 1:
            raise ConfigError("lvm.embed_dim must be positive")
        if self.backend == "external" and not self.factory:
            raise ConfigError("lvm.factory is required for the external backend")


@dataclass
class MapConfig:
    # "language" (text prompts) or "color" (palette rendering + 1x1 lift)
    encoding: str = "language"
    prompts: str = "ensemble"
    ocopt: bool = True
    d_obj: int = 32
    obj_hidden: int = 32

    def validate(self):
        if self.encoding not in ("language", "color"):
            raise ConfigError(f"map.encoding must be 'language' or 'color', got {self.encoding!r}")
        if self.prompts not in PROMPT_CHOICES:
            raise ConfigError(f"map.prompts must be one of {PROMPT_CHOICES}, got {self.prompts!r}")
        if self.d_obj < 1 or self.obj_hidden < 1:
            raise ConfigError("map.d_obj and map.obj_hidden must be positive")


@dataclass
class VisionConfig:
    channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    mlp_ratio: int = 2

    def validate(self):
        if len(self.channels) != 4 or any(int(c) < 1 for c in self.channels):
            raise ConfigError("vision.channels must be 4 positive integers")
        self.channels = tuple(int(c) for c in self.channels)
        if self.mlp_ratio < 1:
            raise ConfigError("vision.mlp_ratio must be positive")


@dataclass
class DistillConfig:
    mode: str = "spatial"
    enabled: bool = True

    def validate(self):
        if self.mode not in ("spatial", "pooled"):
            raise ConfigError(f"distill.mode must be 'spatial' or 'pooled', got {self.mode!r}")


@dataclass
class MoeConfig:
    num_experts: int = 10
    d_diff: int = 32
    hidden: int = 64

    def validate(self):
        if self.num_experts < 1:
            raise ConfigError("moe.num_experts must be >= 1")
        if self.d_diff < 1 or self.hidden < 1:
            raise ConfigError("moe.d_diff and moe.hidden must be positive")


@dataclass
class FuseConfig:
    d_fuse: int = 64

    def validate(self):
        if self.d_fuse < 1:
            raise ConfigError("fuse.d_fuse must be positive")


@dataclass
class LossConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    margin: float = 0.2
    class_weights: tuple[float, float] | None = None

    def validate(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("loss.lambda1 and loss.lambda2 must be non-negative")
        if not 0.0 <= self.margin < 1.0:
            raise ConfigError("loss.margin must lie in [0, 1)")
        if self.class_weights is not None:
            if len(self.class_weights) != 2 or any(w < 0 for w in self.class_weights):
                raise ConfigError("loss.class_weights must be two non-negative numbers")
            self.class_weights = tuple(float(w) for w in self.class_weights)


@dataclass
class OptimConfig:
    # The reference setting is lr 6e-5, batch 12, 32k iterations; these are
    # desk-scale values for CPU training from scratch (see README).
    learning_rate: float = 2e-3
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 4
    max_iters: int = 500
    warmup_fraction: float = 0.1
    poly_power: float = 1.0
    seed: int = 0
    dtype: str = "float64"
    checkpoint_every: int = 0

    @property
    def warmup_iters(self) -> int:
        return int(round(self.warmup_fraction * self.max_iters))

    def validate(self):
        if self.learning_rate < 0:
            raise ConfigError("train.learning_rate must be non-negative")
        if self.batch_size < 1 or self.max_iters < 1:
            raise ConfigError("train.batch_size and train.max_iters must be positive")
        if not 0.0 <= self.warmup_fraction < 1.0 or self.warmup_iters >= self.max_iters:
            raise ConfigError("warmup must be shorter than max_iters")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("train.dtype must be 'float64' or 'float32'")
        self.betas = tuple(float(b) for b in self.betas)


@dataclass
class TrainConfig:
    """Full run configuration: model sub-configs plus optimisation settings."""

    lvm: LvmConfig = field(default_factory=LvmConfig)
    map: MapConfig = field(default_factory=MapConfig)
    vision: VisionConfig = field(default_factory=VisionConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    moe: MoeConfig = field(default_factory=MoeConfig)
    fuse: FuseConfig = field(default_factory=FuseConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: OptimConfig = field(default_factory=OptimConfig)

    def validate(self) -> "TrainConfig":
        for f in dataclasses.fields(self):
            getattr(self, f.name).validate()
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    @classmethod
    def from_dict(cls, data: dict[str, Any] | None) -> "TrainConfig":
        data = dict(data or {})
        sections = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(data) - set(sections)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for name, f in sections.items():
            section_cls = f.default_factory
            raw = data.get(name, {})
            if not isinstance(raw, dict):
                raise ConfigError(f"config section {name!r} must be an object")
            allowed = {sf.name for sf in dataclasses.fields(section_cls)}
            bad = set(raw) - allowed
            if bad:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}")
            kwargs[name] = section_cls(**raw)
        return cls(**kwargs).validate()

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    def replace(self, **overrides) -> "TrainConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"moe.num_experts": 5})``."""
        data = self.to_dict()
        for key, value in overrides.items():
            section, _, name = key.partition(".")
            if section not in data or not name:
                raise ConfigError(f"bad override key {key!r}")
            data[section][name] = value
        return TrainConfig.from_dict(data)
