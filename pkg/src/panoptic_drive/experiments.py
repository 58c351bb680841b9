"""Desk-scale experiments: the overfit smoke run and the ablation table."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import SynthConfig, load_manifest, synth_generate
from .inference import benchmark
from .training import evaluate, fit

log = logging.getLogger(__name__)

DESK_SIZE = (256, 160)


# --- overfit -----------------------------------------------------------------

def overfit_config(steps: int = 300, **overrides) -> RunConfig:
    """Full joint loss, default schedule, no mosaic/mixup, 16-image desk run.

    The box weight is raised to 1.0 so that localization converges inside
    300 steps; see the decisions ledger.
    """
    base = {
        "input_size": DESK_SIZE,
        "train_size": DESK_SIZE,
        "eval_size": DESK_SIZE,
        "use_mosaic": False,
        "use_mixup": False,
        "alpha3": 1.0,
        "batch_size": 4,
        "total_epochs": 75,
        "max_steps": steps,
        "eval_every": 10_000,
        "seed": 0,
    }
    return RunConfig().merged({**base, **overrides})


@dataclass
class OverfitResult:
    first5: float
    last5: float
    loss_drop: float
    map50: float
    recall: float
    drivable_miou: float
    lane_accuracy: float
    lane_iou: float
    steps: int
    seconds: float

    def dumps(self) -> str:
        return json.dumps(asdict(self), indent=2)


def overfit_smoke(workdir: str | Path, steps: int = 300, num_images: int = 16, **overrides) -> OverfitResult:
    """Generate ``num_images`` synthetic scenes, train on them, evaluate on the same split."""
    workdir = Path(workdir)
    t0 = time.perf_counter()
    train = synth_generate(SynthConfig(num_train=num_images, image_size=DESK_SIZE), workdir / "data", seed=0)["train"]
    cfg = overfit_config(steps, **overrides)
    result = fit(cfg, train, workdir / "run")
    totals = [r["total"] for r in result.log_rows]
    report = result.reports[-1][1]
    first5, last5 = float(np.mean(totals[:5])), float(np.mean(totals[-5:]))
    out = OverfitResult(
        first5=first5,
        last5=last5,
        loss_drop=1.0 - last5 / first5,
        map50=report.map50,
        recall=report.recall,
        drivable_miou=report.drivable_miou,
        lane_accuracy=report.lane_accuracy,
        lane_iou=report.lane_iou,
        steps=len(totals),
        seconds=time.perf_counter() - t0,
    )
    (workdir / "overfit.json").write_text(out.dumps())
    return out


# --- ablation ----------------------------------------------------------------

# (row label, config overrides) in table order.
ABLATION_VARIANTS = (
    ("baseline", {"use_mosaic": False, "use_mixup": False}),
    ("+Mosaic&Mixup", {"use_mosaic": True, "use_mixup": True}),
    ("lane: transposed conv", {"use_mosaic": False, "use_mixup": False, "lane_decoder_kind": "transposed_conv"}),
    ("lane: nearest upsample", {"use_mosaic": False, "use_mixup": False, "lane_decoder_kind": "nearest_upsample"}),
    ("lane loss: focal", {"use_mosaic": False, "use_mixup": False, "lane_loss_kind": "focal"}),
    ("lane loss: focal+dice", {"use_mosaic": False, "use_mixup": False, "lane_loss_kind": "focal_plus_dice"}),
)

ABLATION_COLUMNS = ("Speed(fps)", "mAP50", "Recall", "mIoU", "Accuracy", "IoU")


@dataclass
class AblationRow:
    name: str
    fps: float
    map50: float
    recall: float
    miou: float
    accuracy: float
    iou: float
    overrides: dict = field(default_factory=dict)

    def metrics(self) -> tuple[float, ...]:
        """Everything except speed, which depends on the machine."""
        return (self.map50, self.recall, self.miou, self.accuracy, self.iou)


def ablation_data(root: str | Path, num_train: int = 160, num_val: int = 40, seed: int = 0):
    root = Path(root)
    if not (root / "train").exists():
        synth_generate(SynthConfig(num_train=num_train, num_val=num_val, image_size=DESK_SIZE), root, seed=seed)
    return load_manifest(root, "train"), load_manifest(root, "val")


def run_ablation(
    data_root: str | Path,
    workdir: str | Path,
    base: dict | None = None,
    variants=ABLATION_VARIANTS,
    bench_iterations: int = 10,
) -> list[AblationRow]:
    """Train one model per variant from the same seed and evaluate on the val split."""
    train, val = ablation_data(data_root)
    workdir = Path(workdir)
    rows, done = [], {}
    for name, overrides in variants:
        cfg = RunConfig().merged({"input_size": DESK_SIZE, "train_size": DESK_SIZE, "eval_size": DESK_SIZE, **(base or {}), **overrides})
        key = json.dumps(cfg.to_flat(), sort_keys=True)
        if key in done:  # same effective config as an earlier row (e.g. the default decoder)
            rows.append(AblationRow(**{**asdict(done[key]), "name": name, "overrides": overrides}))
            continue
        slug = "".join(ch if ch.isalnum() else "_" for ch in name).strip("_")
        log.info("ablation variant %s", name)
        result = fit(cfg, train, workdir / slug, val_manifest=val)
        report = evaluate(result.model, val, DESK_SIZE, cfg.train.conf_threshold, cfg.train.nms_iou)
        fps = benchmark(result.model, DESK_SIZE, iterations=bench_iterations, warmup=2).fps
        row = AblationRow(name, fps, report.map50, report.recall, report.drivable_miou, report.lane_accuracy, report.lane_iou, overrides)
        done[key] = row
        rows.append(row)
    return rows


def ablation_table(rows: list[AblationRow]) -> str:
    head = f"{'Variant':<24}" + "".join(f"{c:>12}" for c in ABLATION_COLUMNS)
    lines = [head, "-" * len(head)]
    for r in rows:
        vals = (r.fps, r.map50, r.recall, r.miou, r.accuracy, r.iou)
        lines.append(f"{r.name:<24}" + "".join(f"{v:>12.1f}" if i == 0 else f"{v:>12.3f}" for i, v in enumerate(vals)))
    by = {r.name: r for r in rows}
    if "baseline" in by and "+Mosaic&Mixup" in by:
        lines.append(f"delta mAP50 from Mosaic+Mixup: {by['+Mosaic&Mixup'].map50 - by['baseline'].map50:+.3f}")
    return "\n".join(lines)
