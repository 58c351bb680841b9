"""Single-image inference, overlay rendering and the speed/parameter benchmark."""

from __future__ import annotations

import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from .data.transforms import LetterboxInfo, Sample, resize_letterbox
from .model.heads import Detection
from .model.network import PanopticNet, param_count
from .training import postprocess, unletterbox

DRIVABLE_RGB = (0, 200, 0)
LANE_RGB = (255, 0, 0)
DRIVABLE_ALPHA = 0.4
BOX_PALETTE = ((255, 56, 56), (0, 148, 255), (255, 178, 29), (207, 210, 49), (72, 249, 10), (146, 204, 23))


@dataclass
class PerceptionResult:
    detections: list[Detection]
    drivable_mask: np.ndarray  # (h, w) uint8 at source resolution
    lane_mask: np.ndarray
    timing: dict = field(default_factory=dict)  # ms per stage

    def to_json(self, include_timing: bool = True) -> dict:
        d = {
            "detections": [det.to_json() for det in self.detections],
            "image_size": [int(self.drivable_mask.shape[1]), int(self.drivable_mask.shape[0])],
            "drivable_pixels": int(self.drivable_mask.sum()),
            "lane_pixels": int(self.lane_mask.sum()),
        }
        if include_timing:
            d["timing_ms"] = self.timing
        return d


def read_image(path: str | Path) -> np.ndarray:
    """RGB float32 image in [0, 1]; raises OSError for unreadable files."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc


def run_inference(
    model: PanopticNet,
    image: np.ndarray,
    eval_size: tuple[int, int] = (640, 384),
    conf_threshold: float = 0.25,
    nms_iou: float = 0.45,
) -> PerceptionResult:
    """Letterbox, forward, decode + NMS, then map every output back to source pixels."""
    t0 = time.perf_counter()
    h, w = image.shape[:2]
    blank = np.zeros((h, w), np.uint8)
    boxed = resize_letterbox(Sample(image, np.zeros((0, 5)), blank, blank), eval_size)
    x = torch.from_numpy(boxed.image).permute(2, 0, 1)[None].contiguous()
    t1 = time.perf_counter()
    model.eval()
    with torch.no_grad():
        out = model(x)
    t2 = time.perf_counter()
    pred = postprocess(out, model.anchors, eval_size, conf_threshold, nms_iou)[0]
    pred = unletterbox(pred, LetterboxInfo.from_json(boxed.meta["letterbox"]))
    t3 = time.perf_counter()
    timing = {"preprocess": (t1 - t0) * 1e3, "forward": (t2 - t1) * 1e3, "postprocess": (t3 - t2) * 1e3}
    return PerceptionResult(pred.detections, pred.drivable, pred.lane, timing)


def render_overlay(image: np.ndarray, result: PerceptionResult) -> np.ndarray:
    """uint8 RGB overlay: green drivable tint, red lanes, class-colored boxes with labels."""
    base = (np.asarray(image) * 255).round().astype(np.uint8) if image.dtype != np.uint8 else image.copy()
    out = base.astype(np.float32)
    drv = result.drivable_mask.astype(bool)
    out[drv] = (1 - DRIVABLE_ALPHA) * out[drv] + DRIVABLE_ALPHA * np.array(DRIVABLE_RGB)
    out[result.lane_mask.astype(bool)] = LANE_RGB
    canvas = Image.fromarray(out.round().clip(0, 255).astype(np.uint8))
    draw = ImageDraw.Draw(canvas)
    for det in result.detections:
        color = BOX_PALETTE[det.class_id % len(BOX_PALETTE)]
        x1, y1, x2, y2 = (int(round(v)) for v in det.box)
        draw.rectangle([x1, y1, x2, y2], outline=color, width=1)
        draw.text((x1 + 2, max(y1 - 11, 0)), f"{det.class_id} {det.confidence:.2f}", fill=color)
    return np.asarray(canvas)


@dataclass
class BenchmarkReport:
    fps: float
    param_count: int
    input_size: tuple[int, int]
    iterations: int
    warmup: int
    hardware: str
    mean_forward_ms: float

    def text(self) -> str:
        return "\n".join([
            "protocol: batch 1, float32, forward pass only (decode/NMS excluded), warmup iterations discarded",
            f"hardware: {self.hardware}",
            f"input: {self.input_size[0]}x{self.input_size[1]}  iterations: {self.iterations}  warmup: {self.warmup}",
            f"{'Size':>10} | {'Params':>10} | {'Speed(fps)':>10}",
            f"{self.input_size[0]:>10} | {self.param_count / 1e6:>9.2f}M | {self.fps:>10.1f}",
        ])


def hardware_string() -> str:
    return f"{platform.machine()} {platform.processor() or 'cpu'}, torch {torch.__version__}, threads={torch.get_num_threads()}"


def benchmark(model: PanopticNet, input_size: tuple[int, int], iterations: int = 50, warmup: int = 5) -> BenchmarkReport:
    """Frames per second of timed forward passes after ``warmup`` discarded ones."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    w, h = input_size
    x = torch.rand(1, 3, h, w, generator=torch.Generator().manual_seed(0))
    model.eval()
    with torch.no_grad():
        for _ in range(warmup):
            model(x)
        t0 = time.perf_counter()
        for _ in range(iterations):
            model(x)
        elapsed = time.perf_counter() - t0
    return BenchmarkReport(
        fps=iterations / elapsed,
        param_count=param_count(model),
        input_size=(w, h),
        iterations=iterations,
        warmup=warmup,
        hardware=hardware_string(),
        mean_forward_ms=elapsed / iterations * 1e3,
    )
