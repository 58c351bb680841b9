"""Training losses and detection target assignment."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .config import LossWeights
from .model.heads import AnchorSet, decode_xywh

log = logging.getLogger(__name__)

ANCHOR_RATIO_GATE = 4.0
PROB_EPS = 1e-7


@dataclass
class LossBreakdown:
    class_loss: float
    obj_loss: float
    box_loss: float
    drivable_loss: float
    lane_loss: float
    total: float

    FIELDS = ("class_loss", "obj_loss", "box_loss", "drivable_loss", "lane_loss", "total")

    @classmethod
    def combine(cls, class_loss, obj_loss, box_loss, drivable_loss, lane_loss, weights: LossWeights):
        total = (
            weights.alpha1 * class_loss
            + weights.alpha2 * obj_loss
            + weights.alpha3 * box_loss
            + drivable_loss
            + lane_loss
        )
        return cls(class_loss, obj_loss, box_loss, drivable_loss, lane_loss, total)

    def as_floats(self) -> "LossBreakdown":
        return LossBreakdown(*(float(torch.as_tensor(getattr(self, f)).detach()) for f in self.FIELDS))


@dataclass
class ClassCounts:
    tp: torch.Tensor  # (C,)
    fn: torch.Tensor
    fp: torch.Tensor


# --- elementwise losses ---------------------------------------------------

def focal_bce(prob: torch.Tensor, target: torch.Tensor, gamma: float = 2.0, eps: float = PROB_EPS) -> torch.Tensor:
    """Mean focal binary cross-entropy.

    For hard targets this is ``-(1 - p_t)^gamma * log(p_t)``; soft targets
    interpolate between the positive and negative terms.
    """
    if prob.numel() == 0:
        return prob.sum()
    p = prob.clamp(eps, 1 - eps)
    pos = target * (1 - p) ** gamma * -torch.log(p)
    neg = (1 - target) * p ** gamma * -torch.log1p(-p)
    return (pos + neg).mean()


def focal_bce_logits(logits: torch.Tensor, target: torch.Tensor, gamma: float = 2.0) -> torch.Tensor:
    """Same as :func:`focal_bce` on ``sigmoid(logits)``, computed stably from logits."""
    if logits.numel() == 0:
        return logits.sum()
    p = logits.sigmoid()
    log_p = F.logsigmoid(logits)
    log_1mp = F.logsigmoid(-logits)
    pos = target * (1 - p) ** gamma * -log_p
    neg = (1 - target) * p ** gamma * -log_1mp
    return (pos + neg).mean()


def box_iou_xyxy(a: torch.Tensor, b: torch.Tensor, eps: float = 1e-9) -> torch.Tensor:
    iw = (torch.minimum(a[..., 2], b[..., 2]) - torch.maximum(a[..., 0], b[..., 0])).clamp(min=0)
    ih = (torch.minimum(a[..., 3], b[..., 3]) - torch.maximum(a[..., 1], b[..., 1])).clamp(min=0)
    inter = iw * ih
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    return inter / (area_a + area_b - inter + eps)


def ciou(pred: torch.Tensor, gt: torch.Tensor, eps: float = 1e-9) -> torch.Tensor:
    """Complete IoU of paired (x1, y1, x2, y2) boxes.

    IoU minus normalized center distance minus the weighted aspect-ratio term.
    """
    iou = box_iou_xyxy(pred, gt, eps)
    cw = torch.maximum(pred[..., 2], gt[..., 2]) - torch.minimum(pred[..., 0], gt[..., 0])
    ch = torch.maximum(pred[..., 3], gt[..., 3]) - torch.minimum(pred[..., 1], gt[..., 1])
    diag2 = cw ** 2 + ch ** 2 + eps
    dx = (pred[..., 0] + pred[..., 2] - gt[..., 0] - gt[..., 2]) / 2
    dy = (pred[..., 1] + pred[..., 3] - gt[..., 1] - gt[..., 3]) / 2
    rho2 = dx ** 2 + dy ** 2
    w1, h1 = pred[..., 2] - pred[..., 0], pred[..., 3] - pred[..., 1]
    w2, h2 = gt[..., 2] - gt[..., 0], gt[..., 3] - gt[..., 1]
    v = (4 / math.pi ** 2) * (torch.atan(w2 / (h2 + eps)) - torch.atan(w1 / (h1 + eps))) ** 2
    alpha = v / (v - iou + (1 + eps))
    return iou - rho2 / diag2 - alpha * v


def box_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean ``1 - CIoU`` over matched pairs; 0 for an empty set."""
    if pred.shape[0] == 0:
        return pred.sum() * 0.0
    return (1.0 - ciou(pred, gt)).mean()


def cross_entropy_seg(logits: torch.Tensor, gt_mask: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel two-class cross-entropy of (b, 2, H, W) logits against a {0,1} mask."""
    if logits.dim() != 4 or logits.shape[1] != 2:
        raise ValueError(f"expected (b, 2, H, W) logits, got {tuple(logits.shape)}")
    if gt_mask.shape != logits.shape[:1] + logits.shape[2:]:
        raise ValueError(f"mask shape {tuple(gt_mask.shape)} does not match logits {tuple(logits.shape)}")
    return F.cross_entropy(logits, gt_mask.long())


def one_hot_mask(gt_mask: torch.Tensor, dtype=None) -> torch.Tensor:
    """(b, H, W) {0,1} -> (b, 2, H, W) one-hot."""
    return F.one_hot(gt_mask.long(), 2).permute(0, 3, 1, 2).to(dtype or torch.float32)


def tversky_counts(probs: torch.Tensor, gt: torch.Tensor, tol: float = 1e-5) -> ClassCounts:
    """Soft per-class TP, FN, FP counts summed over every pixel of the batch.

    Args:
        probs: (b, C, H, W) per-pixel class probabilities summing to 1 over C.
        gt: (b, C, H, W) one-hot ground truth.
    """
    if probs.shape != gt.shape:
        raise ValueError(f"probs {tuple(probs.shape)} and gt {tuple(gt.shape)} differ in shape")
    total = probs.sum(1).detach()
    total = total[torch.isfinite(total)]  # non-finite values are reported by the training loop
    if not torch.allclose(total, torch.ones_like(total), atol=tol, rtol=0):
        raise ValueError("probabilities are not normalized over the class axis")
    dims = (0, 2, 3)
    tp = (probs * gt).sum(dims)
    fn = ((1 - probs) * gt).sum(dims)
    fp = (probs * (1 - gt)).sum(dims)
    return ClassCounts(tp, fn, fp)


def tversky_term(counts: ClassCounts, weights: LossWeights) -> torch.Tensor:
    """C - sum_c TP / (TP + a*FN + b*FP + eps)."""
    ratio = counts.tp / (counts.tp + weights.tversky_alpha * counts.fn + weights.tversky_beta * counts.fp + weights.seg_eps)
    return counts.tp.numel() - ratio.sum()


def seg_focal_term(probs: torch.Tensor, gt: torch.Tensor, gamma: float = 2.0) -> torch.Tensor:
    """(1/N) sum_c sum_n g (1 - p)^gamma (-log p), N = pixel count."""
    p = probs.clamp(PROB_EPS, 1.0)
    n = probs.shape[0] * probs.shape[2] * probs.shape[3]
    return (gt * (1 - p) ** gamma * -torch.log(p)).sum() / n


def hybrid_seg_loss(probs: torch.Tensor, gt: torch.Tensor, weights: LossWeights) -> torch.Tensor:
    """Tversky/dice term plus ``gamma_tradeoff`` times the focal term.

    Zero at a perfect one-hot prediction and non-negative everywhere.
    """
    counts = tversky_counts(probs, gt)
    return tversky_term(counts, weights) + weights.gamma_tradeoff * seg_focal_term(probs, gt, weights.focal_gamma)


def lane_loss(logits: torch.Tensor, gt_mask: torch.Tensor, weights: LossWeights, kind: str) -> torch.Tensor:
    probs = logits.softmax(1)
    gt = one_hot_mask(gt_mask, probs.dtype)
    if kind == "focal":
        return seg_focal_term(probs, gt, weights.focal_gamma)
    return hybrid_seg_loss(probs, gt, weights)


# --- target assignment ----------------------------------------------------

@dataclass
class Assignment:
    """Positive (scale, anchor, cell) slots for a batch.

    Per scale, tensors are parallel over positives:
      ``index``: (n, 4) long of (image, anchor, gy, gx)
      ``box``: (n, 4) float target (x1, y1, x2, y2) px
      ``cls``: (n,) long
      ``weight``: (n,) float per-box weight (1 unless mixed up)
    """

    index: list[torch.Tensor]
    box: list[torch.Tensor]
    cls: list[torch.Tensor]
    weight: list[torch.Tensor]

    def num_positives(self) -> int:
        return sum(int(i.shape[0]) for i in self.index)

    def cells(self) -> set[tuple[int, int, int, int, int]]:
        """Set of assigned (scale, image, anchor, gy, gx)."""
        return {(s, *map(int, row)) for s, idx in enumerate(self.index) for row in idx}


def assign_targets(
    gt_boxes: list,
    anchors: AnchorSet,
    grids: list[tuple[int, int]],
    box_weights: list | None = None,
) -> Assignment:
    """Match ground-truth boxes to anchors and grid cells.

    A box goes to anchor ``a`` when the worst side ratio between them is under
    4. It is assigned at its center cell plus the nearest horizontal and the
    nearest vertical neighbor cell, where those exist.

    Args:
        gt_boxes: per image, a sequence of (class_id, x1, y1, x2, y2) px.
        anchors: anchor priors.
        grids: per scale (grid_h, grid_w).
        box_weights: per image, per-box weights; defaults to 1.
    """
    per_scale = [([], [], [], []) for _ in anchors.strides]
    for img, boxes in enumerate(gt_boxes):
        weights = box_weights[img] if box_weights is not None else [1.0] * len(boxes)
        for (cls_id, x1, y1, x2, y2), wgt in zip(boxes, weights):
            bw, bh = x2 - x1, y2 - y1
            if bw <= 0 or bh <= 0:
                log.warning("rejecting degenerate box %s in image %d", (x1, y1, x2, y2), img)
                continue
            matched = False
            for s, (group, stride, (gh, gw)) in enumerate(zip(anchors.sizes, anchors.strides, grids)):
                cx, cy = (x1 + x2) / 2 / stride, (y1 + y2) / 2 / stride
                gx, gy = min(int(cx), gw - 1), min(int(cy), gh - 1)
                fx, fy = cx - gx, cy - gy
                cells = [(gx, gy)]
                nx = gx - 1 if fx < 0.5 else gx + 1
                ny = gy - 1 if fy < 0.5 else gy + 1
                if 0 <= nx < gw:
                    cells.append((nx, gy))
                if 0 <= ny < gh:
                    cells.append((gx, ny))
                for a, (aw, ah) in enumerate(group):
                    ratio = max(bw / aw, aw / bw, bh / ah, ah / bh)
                    if ratio >= ANCHOR_RATIO_GATE:
                        continue
                    matched = True
                    for cxi, cyi in cells:
                        idx, box, cl, wt = per_scale[s]
                        idx.append((img, a, cyi, cxi))
                        box.append((x1, y1, x2, y2))
                        cl.append(int(cls_id))
                        wt.append(float(wgt))
            if not matched:
                log.debug("box %s in image %d matches no anchor", (x1, y1, x2, y2), img)
    return Assignment(
        index=[torch.tensor(i, dtype=torch.long).view(-1, 4) for i, _, _, _ in per_scale],
        box=[torch.tensor(b, dtype=torch.float32).view(-1, 4) for _, b, _, _ in per_scale],
        cls=[torch.tensor(c, dtype=torch.long) for _, _, c, _ in per_scale],
        weight=[torch.tensor(w, dtype=torch.float32) for _, _, _, w in per_scale],
    )


# --- detection loss -------------------------------------------------------

def xywh_to_xyxy(b: torch.Tensor) -> torch.Tensor:
    return torch.cat([b[..., :2] - b[..., 2:] / 2, b[..., :2] + b[..., 2:] / 2], -1)


def detection_loss(
    raw: list[torch.Tensor],
    assignment: Assignment,
    anchors: AnchorSet,
    weights: LossWeights,
    soft_obj: bool = True,
):
    """Class, objectness and box losses over all scales.

    Returns the three unweighted tensors (class, obj, box). Objectness targets
    at positive slots are the detached IoU of the decoded box with its target,
    scaled by the box weight (1 instead of the IoU when ``soft_obj`` is off);
    every other slot has target 0.
    """
    dtype = raw[0].dtype
    cls_terms, box_terms, obj_terms = [], [], []
    n_pos = 0
    for s, (r, group, stride) in enumerate(zip(raw, anchors.sizes, anchors.strides)):
        obj_target = torch.zeros(r.shape[:4], dtype=dtype)
        idx = assignment.index[s]
        if idx.shape[0]:
            b, a, gy, gx = idx.unbind(1)
            xywh = decode_xywh(r, torch.tensor(group, dtype=dtype), stride)[b, a, gy, gx]
            pred = xywh_to_xyxy(xywh)
            tgt = assignment.box[s].to(dtype)
            c = ciou(pred, tgt)
            box_terms.append((1.0 - c).sum())
            n_pos += idx.shape[0]
            soft = c.detach().clamp(0, 1) if soft_obj else torch.ones_like(c)
            soft = soft * assignment.weight[s].to(dtype)
            # A slot claimed by several boxes keeps the largest label.
            lin = ((b * r.shape[1] + a) * r.shape[2] + gy) * r.shape[3] + gx
            obj_target = obj_target.view(-1).scatter_reduce(0, lin, soft, reduce="amax").view(r.shape[:4])
            logits = r[b, a, gy, gx, 5:]
            onehot = F.one_hot(assignment.cls[s], logits.shape[-1]).to(dtype)
            cls_terms.append(focal_bce_logits(logits, onehot, weights.det_focal_gamma) * idx.shape[0])
        obj_terms.append(focal_bce_logits(r[..., 4], obj_target, weights.det_focal_gamma))
    zero = raw[0].sum() * 0.0
    class_l = sum(cls_terms) / n_pos if n_pos else zero
    box_l = sum(box_terms) / n_pos if n_pos else zero
    obj_l = sum(obj_terms) / len(obj_terms)
    return class_l, obj_l, box_l


def total_loss(out, batch_targets, anchors: AnchorSet, weights: LossWeights, lane_kind: str):
    """Joint objective for one batch.

    Args:
        out: network output with ``det``, ``drivable`` and ``lane`` fields.
        batch_targets: mapping with ``assignment``, ``drivable`` (b, H, W) and ``lane`` (b, H, W).

    Returns:
        (total tensor, LossBreakdown of tensors)
    """
    class_l, obj_l, box_l = detection_loss(out.det, batch_targets["assignment"], anchors, weights)
    drv = cross_entropy_seg(out.drivable, batch_targets["drivable"])
    lane = lane_loss(out.lane, batch_targets["lane"], weights, lane_kind)
    bd = LossBreakdown.combine(class_l, obj_l, box_l, drv, lane, weights)
    return bd.total, bd
