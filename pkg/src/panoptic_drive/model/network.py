from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from ..config import ModelConfig
from .backbone import Encoder
from .heads import PAN, AnchorSet, DetectHead, DrivableHead, LaneHead


@dataclass
class NetOutput:
    det: list[torch.Tensor]  # per scale (b, 3, h, w, 5 + nc)
    drivable: torch.Tensor  # (b, 2, H, W) logits
    lane: torch.Tensor  # (b, 2, H, W) logits


class PanopticNet(nn.Module):
    """Shared encoder with detection, drivable-area and lane decoders."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.pan = PAN(cfg.neck_channels, cfg.group_count)
        self.detect = DetectHead(cfg.neck_channels, cfg.num_classes, AnchorSet.from_flat(cfg.anchor_sizes))
        self.drivable = DrivableHead(cfg.stage_channels[1], 2 * cfg.head_channels)
        self.lane = LaneHead(cfg.neck_channels, 2 * cfg.head_channels, cfg.lane_decoder_kind)

    @property
    def anchors(self) -> AnchorSet:
        return self.detect.anchor_set()

    def set_anchors(self, anchors: AnchorSet) -> None:
        self.detect.anchors.copy_(anchors.tensor())
        self.cfg.anchor_sizes = tuple(anchors.flat())

    def forward(self, image: torch.Tensor) -> NetOutput:
        feats = self.encoder(image)
        det = self.detect(self.pan(feats))
        return NetOutput(
            det=det,
            drivable=self.drivable(feats.pre_fpn_tap),
            lane=self.lane(feats.levels[0]),
        )


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
