"""Multi-task training loop, learning-rate schedule, checkpoints and evaluation."""

from __future__ import annotations

import csv
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig, RunConfig, TrainConfig
from .data.dataset import DatasetManifest, SampleCache
from .data.pipeline import collate, train_sample
from .data.transforms import LetterboxInfo, resize_letterbox
from .losses import LossBreakdown, assign_targets, total_loss
from .metrics import EvalState, MetricReport
from .model.heads import AnchorSet, Detection, decode_boxes, nms
from .model.network import PanopticNet, param_count

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = "panoptic-drive/checkpoint/v1"
LOG_COLUMNS = ("step", "lr", "class", "obj", "box", "drivable", "lane", "total")
PRE_NMS_TOPK = 3000


class NonFiniteLossError(FloatingPointError):
    def __init__(self, component: str, value: float):
        super().__init__(f"non-finite {component} loss: {value}")
        self.component = component


# --- schedule -------------------------------------------------------------

def lr_at(step: int, cfg: TrainConfig, steps_per_epoch: int) -> float:
    """Learning rate for optimizer step ``step`` (0-based).

    ``restart_kind="warmup"``: linear ramp from 0 to ``initial_lr`` over the
    warmup epochs, then one cosine cycle down to ``initial_lr *
    final_lr_fraction`` at the last step. ``"periodic"``: cosine cycles of
    ``restart_period_epochs`` that restart at ``initial_lr``.
    """
    if step < 0:
        raise ValueError("step must be non-negative")
    lr0, lr_min = cfg.initial_lr, cfg.initial_lr * cfg.final_lr_fraction
    total = cfg.total_epochs * steps_per_epoch
    if cfg.restart_kind == "periodic":
        period = cfg.restart_period_epochs * steps_per_epoch
        phase = (step % period) / period
        return lr_min + (lr0 - lr_min) * (1 + math.cos(math.pi * phase)) / 2
    warm = cfg.warmup_epochs * steps_per_epoch
    if step < warm:
        return lr0 * step / warm
    span = max(total - 1 - warm, 1)
    progress = min((step - warm) / span, 1.0)
    return lr_min + (lr0 - lr_min) * (1 + math.cos(math.pi * progress)) / 2


def build_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.SGD:
    """SGD with momentum; weight decay on conv/linear weights only (not BN or biases)."""
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        (decay if p.ndim > 1 else no_decay).append(p)
    return torch.optim.SGD(
        [{"params": decay, "weight_decay": cfg.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
        lr=cfg.initial_lr,
        momentum=cfg.momentum,
    )


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for g in optimizer.param_groups:
        g["lr"] = lr


# --- anchors --------------------------------------------------------------

def _wh_iou(wh: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    inter = np.minimum(wh[:, None, 0], anchors[None, :, 0]) * np.minimum(wh[:, None, 1], anchors[None, :, 1])
    return inter / (wh[:, None].prod(-1) + anchors[None].prod(-1) - inter)


def kmeans_anchors(wh: np.ndarray, rng: np.random.Generator, k: int = 9, iters: int = 100) -> AnchorSet | None:
    """k-means over box sizes with 1 - IoU distance, split 3/3/3 by area.

    Returns None when there are fewer than ``k`` distinct sizes.
    """
    wh = np.asarray(wh, dtype=np.float64).reshape(-1, 2)
    wh = wh[(wh > 0).all(1)]
    if len(np.unique(wh, axis=0)) < k:
        return None
    centers = wh[rng.choice(len(wh), k, replace=False)]
    for _ in range(iters):
        assign = _wh_iou(wh, centers).argmax(1)
        new = np.array([np.median(wh[assign == j], 0) if (assign == j).any() else centers[j] for j in range(k)])
        if np.allclose(new, centers):
            break
        centers = new
    centers = centers[np.argsort(centers.prod(1))]
    return AnchorSet.from_flat(np.round(centers, 2).tolist())


def dataset_anchors(cache: SampleCache, size: tuple[int, int], seed: int) -> AnchorSet | None:
    wh = []
    for i in range(len(cache)):
        s = resize_letterbox(cache[i], size)
        if len(s.boxes):
            wh.append(s.boxes[:, 3:5] - s.boxes[:, 1:3])
    if not wh:
        return None
    return kmeans_anchors(np.concatenate(wh), np.random.default_rng(seed))


# --- steps ----------------------------------------------------------------

def batch_targets(batch: dict, model: PanopticNet) -> dict:
    h, w = batch["image"].shape[-2:]
    grids = [(h // s, w // s) for s in model.anchors.strides]
    return {
        "assignment": assign_targets(batch["boxes"], model.anchors, grids, batch["box_weights"]),
        "drivable": batch["drivable"],
        "lane": batch["lane"],
    }


def compute_loss(model: PanopticNet, batch: dict, weights) -> tuple[torch.Tensor, LossBreakdown]:
    out = model(batch["image"])
    return total_loss(out, batch_targets(batch, model), model.anchors, weights, model.cfg.lane_loss_kind)


def train_step(model: PanopticNet, batch: dict, weights, lr: float, optimizer: torch.optim.Optimizer) -> LossBreakdown:
    """One SGD step on the joint loss; returns the breakdown measured before the step."""
    model.train()
    set_lr(optimizer, lr)
    optimizer.zero_grad(set_to_none=True)
    total, bd = compute_loss(model, batch, weights)
    values = bd.as_floats()
    for name in LossBreakdown.FIELDS:
        v = getattr(values, name)
        if not math.isfinite(v):
            raise NonFiniteLossError(name, v)
    total.backward()
    optimizer.step()
    return values


# --- checkpoints ----------------------------------------------------------

def save_checkpoint(path: Path, model: PanopticNet, optimizer, run_cfg: RunConfig, epoch: int, step: int, extra=None) -> None:
    cfg = RunConfig(model.cfg, run_cfg.loss, run_cfg.train)
    torch.save(
        {
            "schema": CHECKPOINT_SCHEMA,
            "config": cfg.to_flat(),
            "model": model.state_dict(),
            "optimizer": optimizer.state_dict() if optimizer is not None else None,
            "epoch": epoch,
            "step": step,
            "rng": {"torch": torch.get_rng_state(), "numpy": np.random.get_state(), "python": random.getstate()},
            "extra": extra or {},
        },
        path,
    )


def load_checkpoint(path: str | Path) -> dict:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("schema") != CHECKPOINT_SCHEMA:
        raise ValueError(f"{path}: unsupported checkpoint schema {ckpt.get('schema')!r}")
    return ckpt


def load_model(path: str | Path) -> tuple[PanopticNet, RunConfig]:
    ckpt = load_checkpoint(path)
    cfg = RunConfig.from_flat(ckpt["config"])
    model = PanopticNet(cfg.model)
    model.load_state_dict(ckpt["model"])
    model.eval()
    return model, cfg


# --- evaluation -----------------------------------------------------------

@dataclass
class Prediction:
    detections: list[Detection]
    drivable: np.ndarray
    lane: np.ndarray


def postprocess(out, anchors: AnchorSet, size: tuple[int, int], conf_threshold: float, nms_iou: float) -> list[Prediction]:
    """Decode + NMS detections and argmax masks from a network output at ``size`` (w, h)."""
    dets = decode_boxes(out.det, anchors, conf_threshold, size)
    drv = out.drivable.argmax(1).to(torch.uint8).numpy()
    lane = out.lane.argmax(1).to(torch.uint8).numpy()
    preds = []
    for i, d in enumerate(dets):
        d = sorted(d, key=lambda x: -x.confidence)[:PRE_NMS_TOPK]
        preds.append(Prediction(nms(d, nms_iou), drv[i], lane[i]))
    return preds


def predict(model: PanopticNet, images: torch.Tensor, conf_threshold: float, nms_iou: float) -> list[Prediction]:
    """Network-resolution predictions for a (b, 3, H, W) batch."""
    model.eval()
    with torch.no_grad():
        out = model(images)
    h, w = images.shape[-2:]
    return postprocess(out, model.anchors, (w, h), conf_threshold, nms_iou)


def unletterbox(pred: Prediction, info: LetterboxInfo) -> Prediction:
    dets = []
    for d in pred.detections:
        box = info.inverse_boxes(np.array(d.box))[0]
        if box[2] > box[0] and box[3] > box[1]:
            dets.append(Detection(d.class_id, d.confidence, tuple(float(v) for v in box)))
    return Prediction(dets, info.inverse_mask(pred.drivable), info.inverse_mask(pred.lane))


def evaluate_state(
    model: PanopticNet,
    manifest: DatasetManifest,
    eval_size: tuple[int, int],
    conf_threshold: float = 0.001,
    nms_iou: float = 0.45,
    batch_size: int = 8,
    cache: SampleCache | None = None,
) -> EvalState:
    cache = cache or SampleCache(manifest)
    state = EvalState()
    for start in range(0, len(cache), batch_size):
        idx = range(start, min(start + batch_size, len(cache)))
        originals = [cache[i] for i in idx]
        boxed = [resize_letterbox(s, eval_size) for s in originals]
        images = collate(boxed)["image"]
        for s, b, pred in zip(originals, boxed, predict(model, images, conf_threshold, nms_iou)):
            pred = unletterbox(pred, LetterboxInfo.from_json(b.meta["letterbox"]))
            state.add_image(
                s.meta["source"],
                [(d.class_id, d.confidence, d.box) for d in pred.detections],
                [(int(r[0]), tuple(r[1:])) for r in s.boxes],
                pred.drivable, s.drivable, pred.lane, s.lane,
            )
    return state


def evaluate(model: PanopticNet, manifest: DatasetManifest, eval_size=(640, 384), conf_threshold=0.001, nms_iou=0.45, cache=None) -> MetricReport:
    """Inference + NMS + inverse letterbox over ``manifest``, then all metrics."""
    if len(manifest) == 0:
        log.warning("evaluation split %s is empty", manifest.split)
        return MetricReport(notes=["empty evaluation set"])
    report = evaluate_state(model, manifest, eval_size, conf_threshold, nms_iou, cache=cache).report(conf_threshold)
    report.param_count = param_count(model)
    return report


# --- fit ------------------------------------------------------------------

@dataclass
class FitResult:
    model: PanopticNet
    log_rows: list[dict] = field(default_factory=list)
    reports: list[tuple[int, MetricReport]] = field(default_factory=list)
    last_checkpoint: Path | None = None
    best_checkpoint: Path | None = None


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def steps_per_epoch(n: int, batch_size: int) -> int:
    return max(math.ceil(n / batch_size), 1)


def fit(
    run_cfg: RunConfig,
    manifest: DatasetManifest,
    workdir: str | Path,
    val_manifest: DatasetManifest | None = None,
    resume: str | Path | None = None,
    stop_after_epoch: int | None = None,
) -> FitResult:
    """Train on ``manifest`` following ``run_cfg.train``.

    Writes ``train_log.csv``, ``last.pt`` (every epoch), ``best.pt`` (best
    mAP50 at evaluation epochs) and ``eval_<epoch>.json`` under ``workdir``.
    """
    tc = run_cfg.train
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    torch.use_deterministic_algorithms(True)
    seed_everything(tc.seed)
    cache = SampleCache(manifest)
    if len(cache) == 0:
        raise ValueError("training manifest is empty")
    val_manifest = val_manifest if val_manifest is not None else manifest
    val_cache = cache if val_manifest is manifest else SampleCache(val_manifest)

    model_cfg = ModelConfig(**{**run_cfg.model.__dict__})
    model = PanopticNet(model_cfg)
    optimizer = build_optimizer(model, tc)
    spe = steps_per_epoch(len(cache), tc.batch_size)
    start_epoch, step, best = 0, 0, -1.0
    log_path = workdir / "train_log.csv"

    if resume is not None:
        ckpt = load_checkpoint(resume)
        model.load_state_dict(ckpt["model"])
        model.cfg.anchor_sizes = tuple(model.anchors.flat())
        optimizer.load_state_dict(ckpt["optimizer"])
        start_epoch, step = ckpt["epoch"] + 1, ckpt["step"]
        best = ckpt["extra"].get("best_map50", -1.0)
        torch.set_rng_state(ckpt["rng"]["torch"])
        np.random.set_state(ckpt["rng"]["numpy"])
        random.setstate(ckpt["rng"]["python"])
    else:
        if tc.auto_anchors:
            anchors = dataset_anchors(cache, tc.train_size, tc.seed)
            if anchors is not None:
                model.set_anchors(anchors)
        with open(log_path, "w", newline="") as fh:
            csv.writer(fh).writerow(LOG_COLUMNS)

    result = FitResult(model)
    last = workdir / "last.pt"
    epoch = start_epoch - 1
    try:
        for epoch in range(start_epoch, tc.total_epochs):
            perm = np.random.default_rng([tc.seed, epoch, 7]).permutation(len(cache))
            for b in range(spe):
                if tc.max_steps is not None and step >= tc.max_steps:
                    break
                idx = perm[b * tc.batch_size:(b + 1) * tc.batch_size]
                batch = collate([train_sample(cache, int(i), epoch, model.cfg, tc) for i in idx])
                lr = lr_at(step, tc, spe)
                bd = train_step(model, batch, run_cfg.loss, lr, optimizer)
                row = dict(zip(LOG_COLUMNS, (step, lr, bd.class_loss, bd.obj_loss, bd.box_loss, bd.drivable_loss, bd.lane_loss, bd.total)))
                result.log_rows.append(row)
                with open(log_path, "a", newline="") as fh:
                    csv.writer(fh).writerow([row[c] for c in LOG_COLUMNS])
                step += 1
            done = tc.max_steps is not None and step >= tc.max_steps
            if (epoch + 1) % tc.eval_every == 0 or epoch + 1 == tc.total_epochs or done:
                report = evaluate(model, val_manifest, tc.eval_size, tc.conf_threshold, tc.nms_iou, cache=val_cache)
                result.reports.append((epoch, report))
                (workdir / f"eval_{epoch + 1:04d}.json").write_text(report.dumps())
                if report.map50 > best:
                    best = report.map50
                    save_checkpoint(workdir / "best.pt", model, optimizer, run_cfg, epoch, step, {"best_map50": best})
                    result.best_checkpoint = workdir / "best.pt"
            save_checkpoint(last, model, optimizer, run_cfg, epoch, step, {"best_map50": best})
            result.last_checkpoint = last
            if done or (stop_after_epoch is not None and epoch >= stop_after_epoch):
                break
    except KeyboardInterrupt:
        save_checkpoint(workdir / "interrupt.pt", model, optimizer, run_cfg, epoch, step, {"best_map50": best})
        log.warning("interrupted; checkpoint written to %s", workdir / "interrupt.pt")
        raise
    return result


def read_log(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]
