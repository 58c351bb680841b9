"""Lane label preprocessing: two annotated edge lines -> centerline -> raster mask."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

TRAIN_LANE_WIDTH = 8
TEST_LANE_WIDTH = 2
MIN_CENTERLINE_POINTS = 16


class AnnotationError(ValueError):
    pass


@dataclass
class LaneAnnotation:
    left: np.ndarray  # (n, 2) x, y px
    right: np.ndarray

    def __post_init__(self):
        self.left = np.asarray(self.left, dtype=np.float64).reshape(-1, 2)
        self.right = np.asarray(self.right, dtype=np.float64).reshape(-1, 2)

    @classmethod
    def from_json(cls, d: dict) -> "LaneAnnotation":
        return cls(d["left"], d["right"])

    def to_json(self) -> dict:
        return {"left": self.left.tolist(), "right": self.right.tolist()}


def resample_polyline(points: np.ndarray, k: int) -> np.ndarray:
    """``k`` points spaced uniformly by arclength along ``points``."""
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    if cum[-1] == 0:
        return np.repeat(points[:1], k, axis=0)
    t = np.linspace(0.0, cum[-1], k)
    return np.stack([np.interp(t, cum, points[:, 0]), np.interp(t, cum, points[:, 1])], 1)


def lane_centerline(ann: LaneAnnotation) -> np.ndarray:
    """Pointwise midpoint of the two edge lines after arclength resampling.

    The right line is reversed first if it runs opposite to the left one.
    """
    left, right = ann.left, ann.right
    if len(left) < 2 or len(right) < 2:
        raise AnnotationError("each lane edge needs at least 2 points")
    same = np.linalg.norm(left[0] - right[0]) + np.linalg.norm(left[-1] - right[-1])
    flipped = np.linalg.norm(left[0] - right[-1]) + np.linalg.norm(left[-1] - right[0])
    if flipped < same:
        right = right[::-1]
    k = max(len(left), len(right), MIN_CENTERLINE_POINTS)
    return (resample_polyline(left, k) + resample_polyline(right, k)) / 2


def rasterize_lane(center: np.ndarray, width_px: float, canvas: tuple[int, int]) -> np.ndarray:
    """Mark every pixel within ``width_px / 2`` of the polyline.

    Pixel (row i, col j) is the point (x=j, y=i). Returns an (H, W) uint8 {0,1} mask.
    """
    h, w = canvas
    mask = np.zeros((h, w), dtype=np.uint8)
    pts = np.asarray(center, dtype=np.float64).reshape(-1, 2)
    r = width_px / 2.0
    r2 = r * r
    segments = list(zip(pts[:-1], pts[1:])) if len(pts) > 1 else [(pts[0], pts[0])]
    for p, q in segments:
        x0 = max(int(np.floor(min(p[0], q[0]) - r)), 0)
        x1 = min(int(np.ceil(max(p[0], q[0]) + r)), w - 1)
        y0 = max(int(np.floor(min(p[1], q[1]) - r)), 0)
        y1 = min(int(np.ceil(max(p[1], q[1]) + r)), h - 1)
        if x0 > x1 or y0 > y1:
            continue
        ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1].astype(np.float64)
        d = q - p
        dd = d @ d
        if dd > 0:
            t = np.clip(((xs - p[0]) * d[0] + (ys - p[1]) * d[1]) / dd, 0.0, 1.0)
        else:
            t = np.zeros_like(xs)
        ex = xs - (p[0] + t * d[0])
        ey = ys - (p[1] + t * d[1])
        mask[y0:y1 + 1, x0:x1 + 1] |= (ex * ex + ey * ey <= r2).astype(np.uint8)
    if not mask.any() and len(pts):
        log.warning("lane polyline lies entirely outside the %dx%d canvas", w, h)
    return mask


def lane_mask(annotations: list[LaneAnnotation], width_px: float, canvas: tuple[int, int]) -> np.ndarray:
    mask = np.zeros(canvas, dtype=np.uint8)
    for ann in annotations:
        mask |= rasterize_lane(lane_centerline(ann), width_px, canvas)
    return mask
