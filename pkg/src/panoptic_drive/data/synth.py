"""Synthetic road scenes with exact detection, drivable and lane labels."""

from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np

from .lanes import LaneAnnotation, rasterize_lane


@dataclass
class SynthConfig:
    num_train: int = 16
    num_val: int = 0
    num_test: int = 0
    image_size: tuple[int, int] = (256, 160)  # (w, h)
    objects: tuple[int, int] = (1, 4)  # inclusive range per image
    lanes: tuple[int, int] = (1, 3)
    lane_paint_width: float = 3.0
    object_w: tuple[int, int] = (14, 48)
    object_h: tuple[int, int] = (10, 34)
    num_classes: int = 1
    noise: float = 0.02


@dataclass
class SynthScene:
    image: np.ndarray  # (H, W, 3) uint8
    boxes: list[tuple[int, int, int, int, int]]  # class, x1, y1, x2, y2
    drivable: np.ndarray
    lanes: list[LaneAnnotation]
    centerlines: list[np.ndarray] = field(default_factory=list)
    instances: np.ndarray | None = None  # (H, W) int, k + 1 where object k was painted

    def centerline_mask(self, width: float) -> np.ndarray:
        mask = np.zeros(self.drivable.shape, np.uint8)
        for c in self.centerlines:
            mask |= rasterize_lane(c, width, self.drivable.shape)
        return mask


CLASS_COLORS = np.array([[200, 40, 40], [40, 60, 200], [220, 180, 30], [160, 40, 180]], dtype=np.uint8)


def _bezier(p0, p1, p2, n: int = 24) -> np.ndarray:
    t = np.linspace(0, 1, n)[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2


def _offset_polyline(pts: np.ndarray, d: float) -> np.ndarray:
    """Shift every vertex by ``d`` along the local unit normal."""
    tangent = np.gradient(pts, axis=0)
    tangent /= np.linalg.norm(tangent, axis=1, keepdims=True)
    normal = np.stack([-tangent[:, 1], tangent[:, 0]], 1)
    return pts + d * normal


def generate_scene(cfg: SynthConfig, rng: np.random.Generator) -> SynthScene:
    W, H = cfg.image_size
    ys = np.linspace(0, 1, H)[:, None, None]
    sky = np.array([150, 190, 230]) * (1 - ys) + np.array([200, 215, 230]) * ys
    image = np.broadcast_to(sky, (H, W, 3)).copy()

    horizon = int(rng.uniform(0.32, 0.45) * H)
    image[horizon:] = np.array([70, 120, 60]) + rng.uniform(-10, 10, 3)

    top_c = rng.uniform(0.35, 0.65) * W
    top_half = rng.uniform(0.06, 0.14) * W
    bot_l = rng.uniform(-0.2, 0.15) * W
    bot_r = rng.uniform(0.85, 1.2) * W
    road = np.array(
        [[top_c - top_half, horizon], [top_c + top_half, horizon], [bot_r, H - 1], [bot_l, H - 1]]
    )
    drivable = np.zeros((H, W), np.uint8)
    cv2.fillPoly(drivable, [np.round(road).astype(np.int32)], 1)
    road_color = np.array([85, 85, 90]) + rng.uniform(-8, 8, 3)
    image[drivable.astype(bool)] = road_color

    lanes, centers = [], []
    n_lanes = int(rng.integers(cfg.lanes[0], cfg.lanes[1] + 1))
    fracs = np.sort(rng.uniform(0.15, 0.85, n_lanes))
    for f in fracs:
        p0 = np.array([top_c - top_half + f * 2 * top_half, horizon + 2.0])
        p2 = np.array([bot_l + f * (bot_r - bot_l), H - 1.0])
        bend = rng.uniform(-0.08, 0.08) * W
        p1 = (p0 + p2) / 2 + np.array([bend, 0.0])
        center = _bezier(p0, p1, p2)
        half = cfg.lane_paint_width / 2
        centers.append(center)
        lanes.append(LaneAnnotation(_offset_polyline(center, -half), _offset_polyline(center, half)))
        paint = rasterize_lane(center, cfg.lane_paint_width, (H, W)).astype(bool)
        image[paint] = np.array([235, 235, 225])

    image = image + rng.normal(0, cfg.noise * 255, image.shape)
    image = image.clip(0, 255)

    boxes: list[tuple[int, int, int, int, int]] = []
    taken = np.zeros((H, W), bool)
    instances = np.zeros((H, W), np.int32)
    n_obj = int(rng.integers(cfg.objects[0], cfg.objects[1] + 1))
    for _ in range(n_obj * 20):
        if len(boxes) == n_obj:
            break
        bw = int(rng.integers(cfg.object_w[0], cfg.object_w[1] + 1))
        bh = int(rng.integers(cfg.object_h[0], cfg.object_h[1] + 1))
        x1 = int(rng.integers(0, W - bw + 1))
        y1 = int(rng.integers(max(horizon - bh // 2, 0), H - bh + 1))
        x2, y2 = x1 + bw, y1 + bh
        if taken[max(y1 - 2, 0):y2 + 2, max(x1 - 2, 0):x2 + 2].any():
            continue
        taken[y1:y2, x1:x2] = True
        instances[y1:y2, x1:x2] = len(boxes) + 1
        cls = int(rng.integers(0, cfg.num_classes))
        color = CLASS_COLORS[cls % len(CLASS_COLORS)].astype(np.float64) + rng.uniform(-20, 20, 3)
        image[y1:y2, x1:x2] = color.clip(0, 255)
        # Darker windshield band, inside the box.
        wy1, wy2 = y1 + bh // 5, y1 + bh // 5 + max(bh // 4, 1)
        image[wy1:wy2, x1 + bw // 6:x2 - bw // 6] = color.clip(0, 255) * 0.35
        boxes.append((cls, x1, y1, x2, y2))

    return SynthScene(np.round(image).astype(np.uint8), boxes, drivable, lanes, centers, instances)
