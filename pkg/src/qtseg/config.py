"""Model and training configuration (JSON on disk)."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .blocks import ConfigError


@dataclass
class ModelConfig:
    """Architecture hyperparameters. Layer widths all derive from ``n``."""

    n: int = 16
    num_classes: int = 1
    input_size: int = 512
    in_channels: int = 3
    heads: int = 8
    h_blocks: tuple[int, int, int] = (3, 2, 1)  # stages 2, 1, 0
    mlp_hidden: int = 2048
    mlp_layers: int = 2
    attn_downsample: int = 2
    use_mlff: bool = True
    aggregation: str = "add"
    seed: int = 0

    def __post_init__(self):
        self.h_blocks = tuple(int(h) for h in self.h_blocks)
        self.validate()

    def validate(self) -> None:
        if self.n < 4 or self.n % 4:
            raise ConfigError(f"width multiplier n must be a positive multiple of 4, got {self.n}")
        if self.input_size % 32:
            raise ConfigError(f"input_size must be divisible by 32, got {self.input_size}")
        if len(self.h_blocks) != 3 or min(self.h_blocks) < 1:
            raise ConfigError(f"h_blocks must be three positive ints, got {self.h_blocks}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.in_channels not in (1, 3):
            raise ConfigError("in_channels must be 1 or 3")
        if self.aggregation not in ("add", "concat"):
            raise ConfigError(f"aggregation must be 'add' or 'concat', got {self.aggregation!r}")
        if self.mlp_layers < 2:
            raise ConfigError("mlp_layers must be >= 2")
        for dim in (4 * self.n, 8 * self.n, 16 * self.n):
            if (dim // self.attn_downsample) % self.heads:
                raise ConfigError(f"stage dim {dim} / downsample {self.attn_downsample} "
                                  f"not divisible by {self.heads} heads")

    @property
    def stage_dims(self) -> tuple[int, int, int]:
        return 4 * self.n, 8 * self.n, 16 * self.n

    def to_dict(self) -> dict:
        d = asdict(self)
        d["h_blocks"] = list(self.h_blocks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-4
    decay_every_epochs: int = 50
    min_lr: float = 1e-5
    augment: bool = True
    synthetic_train: int = 200
    synthetic_test: int = 50
    eval_every: int = 0
    log_every: int = 50
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    palette: dict | None = None


def load_config(path: str | Path) -> RunConfig:
    """Read a JSON config: either a bare model dict or ``{"model": ..., "train": ..., "palette": ...}``."""
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    if "model" in raw or "train" in raw:
        unknown = set(raw) - {"model", "train", "palette"}
        if unknown:
            raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
        return RunConfig(ModelConfig.from_dict(raw.get("model", {})),
                         TrainConfig.from_dict(raw.get("train", {})),
                         raw.get("palette"))
    return RunConfig(ModelConfig.from_dict(raw))
