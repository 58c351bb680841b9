"""Task heads: PAN + anchor detection, drivable-area decoder, lane decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from ..config import ANCHORS_PER_SCALE, STRIDES
from .backbone import ConvBNAct, ElanBlock, FeatureMap, PyramidFeatures, StructureError


@dataclass(frozen=True)
class AnchorSet:
    """Anchor priors in input pixels, ``sizes[scale][anchor] = (w, h)``."""

    sizes: tuple[tuple[tuple[float, float], ...], ...]
    strides: tuple[int, ...] = STRIDES

    def __post_init__(self):
        if len(self.sizes) != len(self.strides):
            raise ValueError("one anchor group per stride required")
        for group in self.sizes:
            if len(group) != ANCHORS_PER_SCALE:
                raise ValueError(f"{ANCHORS_PER_SCALE} anchors per scale required")
            if any(w <= 0 or h <= 0 for w, h in group):
                raise ValueError("anchor sizes must be positive")

    @classmethod
    def from_flat(cls, flat) -> "AnchorSet":
        flat = [tuple(map(float, a)) for a in flat]
        n = ANCHORS_PER_SCALE
        return cls(tuple(tuple(flat[i * n:(i + 1) * n]) for i in range(len(STRIDES))))

    def flat(self) -> list[tuple[float, float]]:
        return [a for group in self.sizes for a in group]

    def tensor(self) -> torch.Tensor:
        """(scales, anchors, 2) float tensor of (w, h)."""
        return torch.tensor(self.sizes, dtype=torch.float32)


@dataclass
class Detection:
    class_id: int
    confidence: float
    box: tuple[float, float, float, float]

    def to_json(self) -> dict:
        return {
            "class_id": int(self.class_id),
            "confidence": float(self.confidence),
            "box": [float(v) for v in self.box],
        }


class PAN(nn.Module):
    """Bottom-up path aggregation over FPN outputs."""

    def __init__(self, channels: int, groups: int):
        super().__init__()
        self.down3 = ConvBNAct(channels, channels, 3, 2)
        self.down4 = ConvBNAct(channels, channels, 3, 2)
        self.fuse4 = ElanBlock(2 * channels, channels, groups)
        self.fuse5 = ElanBlock(2 * channels, channels, groups)

    def forward(self, p: PyramidFeatures) -> PyramidFeatures:
        if p.strides != list(STRIDES):
            raise StructureError(f"PAN expects strides {list(STRIDES)}, got {p.strides}")
        p3, p4, p5 = (lvl.data for lvl in p.levels)
        n3 = p3
        n4 = self.fuse4(torch.cat([self.down3(n3), p4], 1))
        n5 = self.fuse5(torch.cat([self.down4(n4), p5], 1))
        return PyramidFeatures(
            levels=[FeatureMap(n, s) for n, s in zip((n3, n4, n5), STRIDES)],
            pre_fpn_tap=p.pre_fpn_tap,
        )


def to_raw_layout(x: torch.Tensor, num_outputs: int) -> torch.Tensor:
    """(b, 3*(5+nc), h, w) -> (b, 3, h, w, 5+nc)."""
    b, _, h, w = x.shape
    return x.view(b, ANCHORS_PER_SCALE, num_outputs, h, w).permute(0, 1, 3, 4, 2).contiguous()


def from_raw_layout(x: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`to_raw_layout`."""
    b, a, h, w, n = x.shape
    return x.permute(0, 1, 4, 2, 3).reshape(b, a * n, h, w)


class DetectHead(nn.Module):
    """Per-scale 1x1 prediction convs producing the raw (tx, ty, tw, th, obj, cls...) layout."""

    def __init__(self, channels: int, num_classes: int, anchors: AnchorSet):
        super().__init__()
        self.num_classes = num_classes
        self.num_outputs = 5 + num_classes
        self.convs = nn.ModuleList(
            nn.Conv2d(channels, ANCHORS_PER_SCALE * self.num_outputs, 1) for _ in STRIDES
        )
        self.register_buffer("anchors", anchors.tensor())
        self._init_biases()

    def _init_biases(self) -> None:
        # Objectness prior of ~8 objects per 640x640 image, class prior 0.6 / nc.
        for conv, stride in zip(self.convs, STRIDES):
            b = conv.bias.detach().view(ANCHORS_PER_SCALE, -1)
            b[:, 4] += math.log(8 / (640 / stride) ** 2)
            b[:, 5:] += math.log(0.6 / (self.num_classes - 0.99))
            conv.bias = nn.Parameter(b.view(-1))

    def anchor_set(self) -> AnchorSet:
        return AnchorSet.from_flat(self.anchors.view(-1, 2).tolist())

    def forward(self, p: PyramidFeatures) -> list[torch.Tensor]:
        return [to_raw_layout(conv(lvl.data), self.num_outputs) for conv, lvl in zip(self.convs, p.levels)]


class DrivableHead(nn.Module):
    """Decoder from the pre-FPN tap: project to stride 16, then four x2 nearest upsamplings."""

    def __init__(self, c_in: int, channels: int, tap_stride: int = 8):
        super().__init__()
        # The tap sits at stride 8; a stride-2 projection lets four doublings reach stride 1.
        self.tap_stride = tap_stride
        self.project = ConvBNAct(c_in, channels, 3, 2)
        layers: list[nn.Module] = []
        c = channels
        for i in range(4):
            c_next = max(c // 2, 8)
            layers += [nn.Upsample(scale_factor=2, mode="nearest"), ConvBNAct(c, c_next, 3)]
            c = c_next
        self.decoder = nn.Sequential(*layers)
        self.out = nn.Conv2d(c, 2, 1)

    def forward(self, tap: FeatureMap) -> torch.Tensor:
        if tap.stride != self.tap_stride:
            raise StructureError(f"drivable head expects a stride-{self.tap_stride} tap, got {tap.stride}")
        return self.out(self.decoder(self.project(tap.data)))


class LaneHead(nn.Module):
    """Decoder from the final FPN output (stride 8) to full resolution.

    ``kind="transposed_conv"`` uses a learned stride-2 transposed conv for every
    doubling; ``kind="nearest_upsample"`` swaps those for nearest upsampling.
    """

    def __init__(self, c_in: int, channels: int, kind: str = "transposed_conv", in_stride: int = 8):
        super().__init__()
        self.kind = kind
        self.in_stride = in_stride
        n_up = int(math.log2(in_stride))
        layers: list[nn.Module] = [ConvBNAct(c_in, channels, 3)]
        c = channels
        for _ in range(n_up):
            c_next = max(c // 2, 8)
            if kind == "transposed_conv":
                layers += [
                    nn.ConvTranspose2d(c, c_next, 2, 2, bias=False),
                    nn.BatchNorm2d(c_next, eps=1e-3, momentum=0.03),
                    nn.SiLU(),
                ]
            elif kind == "nearest_upsample":
                layers += [nn.Upsample(scale_factor=2, mode="nearest"), ConvBNAct(c, c_next, 1)]
            else:
                raise ValueError(f"unknown lane decoder kind {kind!r}")
            layers.append(ConvBNAct(c_next, c_next, 3))
            c = c_next
        self.decoder = nn.Sequential(*layers)
        self.out = nn.Conv2d(c, 2, 1)
        # Lane pixels are rare: start from a ~1% foreground prior.
        with torch.no_grad():
            self.out.bias.copy_(torch.tensor([0.0, math.log(0.01 / 0.99)]))

    def forward(self, deep: FeatureMap) -> torch.Tensor:
        if deep.stride != self.in_stride:
            raise StructureError(f"lane head expects stride {self.in_stride}, got {deep.stride}")
        return self.out(self.decoder(deep.data))


def count_layers(module: nn.Module, kind: type) -> int:
    return sum(isinstance(m, kind) for m in module.modules())


def count_nearest_upsamples(module: nn.Module) -> int:
    return sum(isinstance(m, nn.Upsample) and m.mode == "nearest" for m in module.modules())


# --- box coding -----------------------------------------------------------

def _logit(p: np.ndarray | float) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def encode_box(box, cell: tuple[int, int], stride: int, anchor: tuple[float, float]) -> np.ndarray:
    """Invert the decode formula: box (x1, y1, x2, y2) px -> raw (tx, ty, tw, th).

    Only boxes whose center lies in (cell - 0.5, cell + 1.5) grid units and
    whose sides are under 4x the anchor are representable.
    """
    x1, y1, x2, y2 = box
    cx, cy = (x1 + x2) / 2 / stride, (y1 + y2) / 2 / stride
    ox, oy = cx - cell[0], cy - cell[1]
    sw, sh = (x2 - x1) / anchor[0], (y2 - y1) / anchor[1]
    return np.array([
        _logit((ox + 0.5) / 2), _logit((oy + 0.5) / 2),
        _logit(np.sqrt(sw) / 2), _logit(np.sqrt(sh) / 2),
    ])


def decode_xywh(raw: torch.Tensor, anchors: torch.Tensor, stride: int) -> torch.Tensor:
    """Decode (..., h, w, >=4) raw offsets into (cx, cy, w, h) px.

    Args:
        raw: (b, 3, h, w, n) tensor.
        anchors: (3, 2) anchor sizes for this scale.
    """
    _, _, h, w, _ = raw.shape
    gy, gx = torch.meshgrid(
        torch.arange(h, dtype=raw.dtype, device=raw.device),
        torch.arange(w, dtype=raw.dtype, device=raw.device),
        indexing="ij",
    )
    s = raw[..., :4].sigmoid()
    cx = (2 * s[..., 0] - 0.5 + gx) * stride
    cy = (2 * s[..., 1] - 0.5 + gy) * stride
    a = anchors.to(raw.dtype).view(1, -1, 1, 1, 2)
    bw = (2 * s[..., 2]) ** 2 * a[..., 0]
    bh = (2 * s[..., 3]) ** 2 * a[..., 1]
    return torch.stack([cx, cy, bw, bh], -1)


def decode_boxes(
    raw: list[torch.Tensor],
    anchors: AnchorSet,
    conf_threshold: float,
    image_size: tuple[int, int] | None = None,
) -> list[list[Detection]]:
    """Decode raw head output into per-image detections above ``conf_threshold``.

    confidence = sigmoid(obj) * sigmoid(class logit), boxes clipped to
    ``image_size`` (w, h) when given.
    """
    batch = raw[0].shape[0]
    out: list[list[Detection]] = [[] for _ in range(batch)]
    with torch.no_grad():
        for r, group, stride in zip(raw, anchors.sizes, anchors.strides):
            r = r.detach().double()
            xywh = decode_xywh(r, torch.tensor(group, dtype=torch.float64), stride)
            conf = r[..., 4:5].sigmoid() * r[..., 5:].sigmoid()
            boxes = torch.cat([xywh[..., :2] - xywh[..., 2:] / 2, xywh[..., :2] + xywh[..., 2:] / 2], -1)
            if image_size is not None:
                boxes[..., 0::2] = boxes[..., 0::2].clamp(0, image_size[0])
                boxes[..., 1::2] = boxes[..., 1::2].clamp(0, image_size[1])
            keep = conf >= conf_threshold
            for bi, ai, yi, xi, ci in keep.nonzero().tolist():
                x1, y1, x2, y2 = boxes[bi, ai, yi, xi].tolist()
                if x2 <= x1 or y2 <= y1:
                    continue
                out[bi].append(Detection(ci, float(conf[bi, ai, yi, xi, ci]), (x1, y1, x2, y2)))
    return out


# --- NMS ------------------------------------------------------------------

def nms(dets: list[Detection], iou_threshold: float = 0.45, max_det: int = 300) -> list[Detection]:
    """Greedy per-class suppression; result sorted by descending confidence.

    A box is dropped when its IoU with an already kept box of the same class
    exceeds ``iou_threshold``.
    """
    if not dets:
        return []
    boxes = np.array([d.box for d in dets], dtype=np.float64)
    conf = np.array([d.confidence for d in dets])
    cls = np.array([d.class_id for d in dets])
    # Ties broken by class then box corners, so input order never matters.
    order = np.lexsort((boxes[:, 3], boxes[:, 2], boxes[:, 1], boxes[:, 0], cls, -conf))
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    suppressed = np.zeros(len(dets), dtype=bool)
    kept: list[int] = []
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        kept.append(i)
        if len(kept) >= max_det:
            break
        rest = order[pos + 1:]
        rest = rest[(~suppressed[rest]) & (cls[rest] == cls[i])]
        if rest.size == 0:
            continue
        iw = np.minimum(boxes[i, 2], boxes[rest, 2]) - np.maximum(boxes[i, 0], boxes[rest, 0])
        ih = np.minimum(boxes[i, 3], boxes[rest, 3]) - np.maximum(boxes[i, 1], boxes[rest, 1])
        inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
        union = areas[i] + areas[rest] - inter
        iou = np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)
        suppressed[rest[iou > iou_threshold]] = True
    return [dets[i] for i in kept]
