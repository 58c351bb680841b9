"""Per-sample training augmentation and batch collation."""

from __future__ import annotations

import numpy as np
import torch

from ..config import ModelConfig, TrainConfig
from .dataset import SampleCache
from .transforms import Sample, hflip, hsv_jitter, mixup, mosaic, resize_letterbox

MIXUP_BETA = 32.0


def mosaic_active(epoch: int, model_cfg: ModelConfig, train_cfg: TrainConfig) -> bool:
    return model_cfg.use_mosaic and epoch < train_cfg.total_epochs - train_cfg.close_mosaic_epochs


def _base(cache: SampleCache, idx: int, rng, epoch, model_cfg, train_cfg) -> Sample:
    if mosaic_active(epoch, model_cfg, train_cfg) and rng.random() < train_cfg.mosaic_prob:
        others = rng.integers(0, len(cache), 3)
        return mosaic([cache[idx]] + [cache[int(j)] for j in others], train_cfg.train_size, rng)
    return resize_letterbox(cache[idx], train_cfg.train_size)


def train_sample(cache: SampleCache, idx: int, epoch: int, model_cfg: ModelConfig, train_cfg: TrainConfig) -> Sample:
    """Augmented training view of sample ``idx``.

    Randomness comes only from (seed, epoch, idx), so any worker or a resumed
    run produces the same view.
    """
    rng = np.random.default_rng([train_cfg.seed, epoch, idx])
    s = _base(cache, idx, rng, epoch, model_cfg, train_cfg)
    mixup_ok = model_cfg.use_mixup and (mosaic_active(epoch, model_cfg, train_cfg) or not model_cfg.use_mosaic)
    if mixup_ok and rng.random() < train_cfg.mixup_prob:
        other = _base(cache, int(rng.integers(0, len(cache))), rng, epoch, model_cfg, train_cfg)
        s = mixup(s, other, float(rng.beta(MIXUP_BETA, MIXUP_BETA)))
    if train_cfg.hsv_jitter:
        s = hsv_jitter(s, rng)
    if train_cfg.hflip and rng.random() < 0.5:
        s = hflip(s)
    return s


def collate(samples: list[Sample]) -> dict:
    images = torch.from_numpy(np.stack([s.image for s in samples])).permute(0, 3, 1, 2).contiguous().float()
    return {
        "image": images,
        "drivable": torch.from_numpy(np.stack([s.drivable for s in samples])).long(),
        "lane": torch.from_numpy(np.stack([s.lane for s in samples])).long(),
        "boxes": [s.boxes.tolist() for s in samples],
        "box_weights": [s.box_weights.tolist() for s in samples],
        "meta": [s.meta for s in samples],
    }
