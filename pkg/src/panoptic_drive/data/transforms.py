"""Sample container and label-consistent image transforms."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import cv2
import numpy as np

PAD_VALUE = 114 / 255
MOSAIC_MIN_AREA_FRAC = 0.10
MOSAIC_MIN_SIDE = 2.0  # px; thinner crops cannot pass the anchor ratio gate


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    boxes: np.ndarray  # (n, 5) class_id, x1, y1, x2, y2 px
    drivable: np.ndarray  # (H, W) uint8 {0, 1}
    lane: np.ndarray  # (H, W) uint8 {0, 1}
    box_weights: np.ndarray | None = None  # (n,)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 5)
        if self.box_weights is None:
            self.box_weights = np.ones(len(self.boxes))
        self.box_weights = np.asarray(self.box_weights, dtype=np.float64)
        self.meta.setdefault("transforms", [])

    @property
    def size(self) -> tuple[int, int]:
        """(width, height)."""
        return self.image.shape[1], self.image.shape[0]

    def validate(self) -> None:
        h, w = self.image.shape[:2]
        if self.drivable.shape != (h, w) or self.lane.shape != (h, w):
            raise ValueError("masks must match the image size")
        b = self.boxes
        if len(b) and (b[:, 1].min() < 0 or b[:, 2].min() < 0 or b[:, 3].max() > w or b[:, 4].max() > h):
            raise ValueError("boxes fall outside the image")


def _resize(img: np.ndarray, size: tuple[int, int], nearest: bool) -> np.ndarray:
    if (img.shape[1], img.shape[0]) == tuple(size):
        return img.copy()
    interp = cv2.INTER_NEAREST_EXACT if nearest else cv2.INTER_LINEAR
    return cv2.resize(img, tuple(size), interpolation=interp)


@dataclass(frozen=True)
class LetterboxInfo:
    orig_size: tuple[int, int]  # (w, h)
    new_size: tuple[int, int]  # resized content (w, h) before padding
    pad: tuple[int, int]  # (left, top)
    out_size: tuple[int, int]

    @property
    def scale(self) -> tuple[float, float]:
        return self.new_size[0] / self.orig_size[0], self.new_size[1] / self.orig_size[1]

    def forward_boxes(self, xyxy: np.ndarray) -> np.ndarray:
        sx, sy = self.scale
        out = np.array(xyxy, dtype=np.float64).reshape(-1, 4).copy()
        out[:, 0::2] = out[:, 0::2] * sx + self.pad[0]
        out[:, 1::2] = out[:, 1::2] * sy + self.pad[1]
        return out

    def inverse_boxes(self, xyxy: np.ndarray) -> np.ndarray:
        sx, sy = self.scale
        out = np.array(xyxy, dtype=np.float64).reshape(-1, 4).copy()
        out[:, 0::2] = (out[:, 0::2] - self.pad[0]) / sx
        out[:, 1::2] = (out[:, 1::2] - self.pad[1]) / sy
        out[:, 0::2] = out[:, 0::2].clip(0, self.orig_size[0])
        out[:, 1::2] = out[:, 1::2].clip(0, self.orig_size[1])
        return out

    def inverse_mask(self, mask: np.ndarray) -> np.ndarray:
        l, t = self.pad
        nw, nh = self.new_size
        return _resize(np.ascontiguousarray(mask[t:t + nh, l:l + nw]), self.orig_size, nearest=True)

    def to_json(self) -> dict:
        return {"orig_size": list(self.orig_size), "new_size": list(self.new_size),
                "pad": list(self.pad), "out_size": list(self.out_size)}

    @classmethod
    def from_json(cls, d: dict) -> "LetterboxInfo":
        return cls(*(tuple(d[k]) for k in ("orig_size", "new_size", "pad", "out_size")))


def letterbox_info(orig: tuple[int, int], out: tuple[int, int]) -> LetterboxInfo:
    w, h = orig
    W, H = out
    r = min(W / w, H / h)
    nw, nh = int(round(w * r)), int(round(h * r))
    return LetterboxInfo((w, h), (nw, nh), ((W - nw) // 2, (H - nh) // 2), (W, H))


def resize_letterbox(s: Sample, out: tuple[int, int]) -> Sample:
    """Aspect-preserving resize to ``out`` (w, h) with symmetric gray padding.

    Boxes and masks follow the same map; the transform is stored in
    ``meta["letterbox"]`` for inverse mapping.
    """
    W, H = out
    if W % 32 or H % 32:
        raise ValueError(f"letterbox size {out} must be divisible by 32")
    info = letterbox_info(s.size, out)
    (l, t), (nw, nh) = info.pad, info.new_size
    image = np.full((H, W, 3), PAD_VALUE, dtype=np.float32)
    image[t:t + nh, l:l + nw] = _resize(s.image, (nw, nh), nearest=False)
    masks = []
    for m in (s.drivable, s.lane):
        canvas = np.zeros((H, W), dtype=np.uint8)
        canvas[t:t + nh, l:l + nw] = _resize(m, (nw, nh), nearest=True)
        masks.append(canvas)
    boxes = s.boxes.copy()
    if len(boxes):
        boxes[:, 1:] = info.forward_boxes(boxes[:, 1:])
    meta = copy.deepcopy(s.meta)
    meta["letterbox"] = info.to_json()
    meta["transforms"].append("letterbox")
    return Sample(image, boxes, masks[0], masks[1], s.box_weights.copy(), meta)


def place(
    s: Sample,
    scale: float,
    offset: tuple[int, int],
    region: tuple[int, int, int, int],
    canvas: Sample,
    min_area_frac: float = MOSAIC_MIN_AREA_FRAC,
) -> tuple[np.ndarray, np.ndarray]:
    """Paint ``s`` scaled by ``scale`` at integer ``offset`` into ``canvas``, cropped to ``region``.

    Args:
        region: (x1, y1, x2, y2) canvas pixels the sample may occupy.

    Returns:
        Transformed boxes kept after clipping to ``region`` and their weights.
    """
    w, h = s.size
    nw, nh = max(int(round(w * scale)), 1), max(int(round(h * scale)), 1)
    ox, oy = offset
    rx1, ry1, rx2, ry2 = region
    # Visible window, in canvas and in resized-sample coordinates.
    cx1, cy1 = max(rx1, ox), max(ry1, oy)
    cx2, cy2 = min(rx2, ox + nw), min(ry2, oy + nh)
    if cx2 > cx1 and cy2 > cy1:
        sl_c = (slice(cy1, cy2), slice(cx1, cx2))
        sl_s = (slice(cy1 - oy, cy2 - oy), slice(cx1 - ox, cx2 - ox))
        canvas.image[sl_c] = _resize(s.image, (nw, nh), nearest=False)[sl_s]
        canvas.drivable[sl_c] = _resize(s.drivable, (nw, nh), nearest=True)[sl_s]
        canvas.lane[sl_c] = _resize(s.lane, (nw, nh), nearest=True)[sl_s]
    if not len(s.boxes):
        return np.zeros((0, 5)), np.zeros(0)
    b = s.boxes.copy()
    b[:, 1::2] = b[:, 1::2] * (nw / w) + ox
    b[:, 2::2] = b[:, 2::2] * (nh / h) + oy
    area = (b[:, 3] - b[:, 1]) * (b[:, 4] - b[:, 2])
    clipped = b.copy()
    clipped[:, 1::2] = clipped[:, 1::2].clip(rx1, rx2)
    clipped[:, 2::2] = clipped[:, 2::2].clip(ry1, ry2)
    new_area = (clipped[:, 3] - clipped[:, 1]) * (clipped[:, 4] - clipped[:, 2])
    side = np.minimum(clipped[:, 3] - clipped[:, 1], clipped[:, 4] - clipped[:, 2])
    keep = (new_area > 0) & (new_area >= min_area_frac * area) & (side >= MOSAIC_MIN_SIDE)
    return clipped[keep], s.box_weights[keep]


def mosaic(
    samples: list[Sample],
    canvas: tuple[int, int],
    rng: np.random.Generator,
    center: tuple[int, int] | None = None,
    scales: list[float] | None = None,
) -> Sample:
    """Splice four samples around a center point, one per quadrant.

    Each sample is scaled and anchored with its inner corner on the center:
    the top-left quadrant shows the bottom-right of sample 0, and so on.
    """
    if len(samples) != 4:
        raise ValueError(f"mosaic needs exactly 4 samples, got {len(samples)}")
    W, H = canvas
    if center is None:
        center = (int(rng.uniform(0.25 * W, 0.75 * W)), int(rng.uniform(0.25 * H, 0.75 * H)))
    if scales is None:
        scales = [min(W / s.size[0], H / s.size[1]) * rng.uniform(0.5, 1.0) for s in samples]
    xc, yc = center
    out = Sample(
        np.full((H, W, 3), PAD_VALUE, dtype=np.float32),
        np.zeros((0, 5)),
        np.zeros((H, W), np.uint8),
        np.zeros((H, W), np.uint8),
        meta={"source": [s.meta.get("source") for s in samples], "transforms": ["mosaic"], "mosaic_center": [xc, yc]},
    )
    boxes, weights = [], []
    for q, (s, sc) in enumerate(zip(samples, scales)):
        nw, nh = max(int(round(s.size[0] * sc)), 1), max(int(round(s.size[1] * sc)), 1)
        left, top = q % 2 == 0, q < 2
        offset = (xc - nw if left else xc, yc - nh if top else yc)
        region = (0 if left else xc, 0 if top else yc, xc if left else W, yc if top else H)
        b, wts = place(s, sc, offset, region, out)
        boxes.append(b)
        weights.append(wts)
    out.boxes = np.concatenate(boxes).reshape(-1, 5)
    out.box_weights = np.concatenate(weights)
    return out


def mixup(a: Sample, b: Sample, lam: float) -> Sample:
    """Pixelwise convex blend; boxes unioned with weights lam / (1 - lam); masks OR-ed."""
    if a.image.shape != b.image.shape:
        raise ValueError(f"mixup needs equal sizes, got {a.image.shape} vs {b.image.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    image = (lam * a.image + (1.0 - lam) * b.image).astype(np.float32)
    meta = {"source": [a.meta.get("source"), b.meta.get("source")], "transforms": ["mixup"], "mixup_lambda": float(lam)}
    return Sample(
        image,
        np.concatenate([a.boxes, b.boxes]),
        a.drivable | b.drivable,
        a.lane | b.lane,
        np.concatenate([lam * a.box_weights, (1.0 - lam) * b.box_weights]),
        meta,
    )


def hflip(s: Sample) -> Sample:
    w = s.size[0]
    boxes = s.boxes.copy()
    if len(boxes):
        boxes[:, 1], boxes[:, 3] = w - s.boxes[:, 3], w - s.boxes[:, 1]
    meta = copy.deepcopy(s.meta)
    meta["transforms"].append("hflip")
    return Sample(s.image[:, ::-1].copy(), boxes, s.drivable[:, ::-1].copy(), s.lane[:, ::-1].copy(), s.box_weights.copy(), meta)


def hsv_jitter(s: Sample, rng: np.random.Generator, gains=(0.015, 0.7, 0.4)) -> Sample:
    """Random hue/saturation/value gain; labels untouched."""
    r = rng.uniform(-1, 1, 3) * np.asarray(gains) + 1
    hsv = cv2.cvtColor(s.image, cv2.COLOR_RGB2HSV)
    hsv[..., 0] = (hsv[..., 0] * r[0]) % 360
    hsv[..., 1:] = (hsv[..., 1:] * r[1:]).clip(0, 1)
    meta = copy.deepcopy(s.meta)
    meta["transforms"].append("hsv")
    img = cv2.cvtColor(hsv.astype(np.float32), cv2.COLOR_HSV2RGB).clip(0, 1)
    return Sample(img, s.boxes.copy(), s.drivable.copy(), s.lane.copy(), s.box_weights.copy(), meta)
