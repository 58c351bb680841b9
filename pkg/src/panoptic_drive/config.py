"""Run configuration: model, loss and training settings.

All three configs serialize to one flat key-value YAML file. Keys are the
dataclass field names; a key belongs to whichever dataclass declares it.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

STRIDES = (8, 16, 32)
ANCHORS_PER_SCALE = 3
LANE_DECODER_KINDS = ("transposed_conv", "nearest_upsample")
LANE_LOSS_KINDS = ("focal_plus_dice", "focal")
RESTART_KINDS = ("warmup", "periodic")

# (w, h) px per anchor, three per stride, sized for the synthetic 256x160 scenes.
DEFAULT_ANCHORS = (
    (10.0, 8.0), (16.0, 12.0), (22.0, 16.0),
    (28.0, 22.0), (38.0, 26.0), (44.0, 34.0),
    (56.0, 40.0), (80.0, 56.0), (120.0, 90.0),
)


class ConfigError(ValueError):
    """Raised for structurally invalid configuration values."""


@dataclass
class ModelConfig:
    input_size: tuple[int, int] = (640, 384)
    stem_channels: int = 32
    stage_channels: tuple[int, ...] = (64, 128, 256, 512)
    blocks_per_stage: int = 2
    neck_channels: int = 128
    head_channels: int = 32
    group_count: int = 2
    num_classes: int = 1
    spp_kernels: tuple[int, ...] = (5, 9, 13)
    anchor_sizes: tuple[tuple[float, float], ...] = DEFAULT_ANCHORS
    use_mosaic: bool = True
    use_mixup: bool = True
    lane_decoder_kind: str = "transposed_conv"
    lane_loss_kind: str = "focal_plus_dice"

    @property
    def strides(self) -> tuple[int, ...]:
        return STRIDES

    @property
    def anchors_per_scale(self) -> int:
        return ANCHORS_PER_SCALE

    def validate(self) -> "ModelConfig":
        w, h = self.input_size
        if w % 32 or h % 32:
            raise ConfigError(f"input_size {self.input_size} must be divisible by 32")
        if len(self.stage_channels) != 4:
            raise ConfigError("stage_channels needs exactly 4 entries (strides 4, 8, 16, 32)")
        if self.group_count < 1:
            raise ConfigError("group_count must be positive")
        for c in (self.stem_channels, *self.stage_channels, self.neck_channels, self.head_channels):
            if c % (2 * self.group_count):
                raise ConfigError(
                    f"channel count {c} not divisible by 2 * group_count ({2 * self.group_count})"
                )
        if self.num_classes < 1:
            raise ConfigError("num_classes must be positive")
        if len(self.anchor_sizes) != len(STRIDES) * ANCHORS_PER_SCALE:
            raise ConfigError("anchor_sizes needs 3 scales x 3 anchors = 9 entries")
        if any(aw <= 0 or ah <= 0 for aw, ah in self.anchor_sizes):
            raise ConfigError("anchor sizes must be positive")
        if any(k < 1 or k % 2 == 0 for k in self.spp_kernels):
            raise ConfigError(f"SPP kernels must be odd and >= 1, got {self.spp_kernels}")
        if self.lane_decoder_kind not in LANE_DECODER_KINDS:
            raise ConfigError(f"lane_decoder_kind must be one of {LANE_DECODER_KINDS}")
        if self.lane_loss_kind not in LANE_LOSS_KINDS:
            raise ConfigError(f"lane_loss_kind must be one of {LANE_LOSS_KINDS}")
        return self


@dataclass
class LossWeights:
    alpha1: float = 0.5  # class
    alpha2: float = 1.0  # objectness
    alpha3: float = 0.05  # box
    gamma_tradeoff: float = 1.0
    tversky_alpha: float = 0.5
    tversky_beta: float = 0.5
    focal_gamma: float = 2.0
    det_focal_gamma: float = 2.0
    seg_eps: float = 1e-6

    def validate(self) -> "LossWeights":
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"{f.name} must be non-negative")
        if self.seg_eps <= 0:
            raise ConfigError("seg_eps must be positive")
        return self


@dataclass
class TrainConfig:
    initial_lr: float = 0.01
    final_lr_fraction: float = 0.01
    warmup_epochs: int = 3
    total_epochs: int = 50
    momentum: float = 0.937
    weight_decay: float = 0.005
    batch_size: int = 4
    seed: int = 0
    eval_every: int = 10
    restart_kind: str = "warmup"
    restart_period_epochs: int = 10
    # Desk-scale synthetic runs override both with (256, 160).
    train_size: tuple[int, int] = (640, 640)
    eval_size: tuple[int, int] = (640, 384)
    mixup_prob: float = 0.15
    mosaic_prob: float = 1.0
    close_mosaic_epochs: int = 10
    hsv_jitter: bool = False
    hflip: bool = False
    auto_anchors: bool = True
    max_steps: int | None = None
    conf_threshold: float = 0.001
    nms_iou: float = 0.45

    def validate(self) -> "TrainConfig":
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ConfigError("warmup_epochs must be < total_epochs")
        if not 0 < self.final_lr_fraction <= 1:
            raise ConfigError("final_lr_fraction must be in (0, 1]")
        for name in ("initial_lr", "momentum", "weight_decay", "batch_size", "eval_every"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.restart_kind not in RESTART_KINDS:
            raise ConfigError(f"restart_kind must be one of {RESTART_KINDS}")
        for size in (self.train_size, self.eval_size):
            if size[0] % 32 or size[1] % 32:
                raise ConfigError(f"image size {size} must be divisible by 32")
        return self


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_flat(self) -> dict[str, Any]:
        flat: dict[str, Any] = {}
        for part in (self.model, self.loss, self.train):
            for k, v in dataclasses.asdict(part).items():
                flat[k] = _plain(v)
        return flat

    @classmethod
    def from_flat(cls, flat: dict[str, Any]) -> "RunConfig":
        cfg = cls()
        return cfg.merged(flat)

    def merged(self, overrides: dict[str, Any]) -> "RunConfig":
        """Return a copy with ``overrides`` applied; unknown keys raise."""
        parts = {
            "model": dataclasses.asdict(self.model),
            "loss": dataclasses.asdict(self.loss),
            "train": dataclasses.asdict(self.train),
        }
        owner = {k: name for name, d in parts.items() for k in d}
        for k, v in overrides.items():
            if v is None and k != "max_steps":
                continue
            if k not in owner:
                raise ConfigError(f"unknown config key {k!r}")
            parts[owner[k]][k] = _coerce(getattr(_DEFAULTS[owner[k]], k), v)
        return RunConfig(
            model=ModelConfig(**parts["model"]).validate(),
            loss=LossWeights(**parts["loss"]).validate(),
            train=TrainConfig(**parts["train"]).validate(),
        )


_DEFAULTS = {"model": ModelConfig(), "loss": LossWeights(), "train": TrainConfig()}


def _plain(v: Any) -> Any:
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    return v


def _coerce(default: Any, value: Any) -> Any:
    if isinstance(default, tuple):
        return tuple(_coerce(default[0] if default else None, x) for x in value)
    if isinstance(default, bool):
        if isinstance(value, str):
            return value.lower() in ("1", "true", "yes", "on")
        return bool(value)
    if isinstance(default, int) and not isinstance(value, bool):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def load_config(path: str | Path) -> RunConfig:
    with open(path) as fh:
        flat = yaml.safe_load(fh) or {}
    if not isinstance(flat, dict):
        raise ConfigError(f"{path}: expected a flat mapping of keys to values")
    return RunConfig.from_flat(flat)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_flat(), fh, sort_keys=False)
