"""Detection and segmentation metrics with mergeable accumulation state."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

log = logging.getLogger(__name__)

AP_IOU = 0.5


class MetricError(ValueError):
    pass


def iou_box(a, b) -> float:
    """IoU of two (x1, y1, x2, y2) boxes; degenerate boxes give 0."""
    if a[2] <= a[0] or a[3] <= a[1] or b[2] <= b[0] or b[3] <= b[1]:
        log.warning("degenerate box in IoU: %s vs %s", a, b)
        return 0.0
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def match_image(dets, gts, iou_thr: float = AP_IOU) -> list[tuple[int, float, bool]]:
    """Greedy one-to-one matching of one image's detections to its ground truth.

    Args:
        dets: sequence of (class_id, confidence, (x1, y1, x2, y2)).
        gts: sequence of (class_id, (x1, y1, x2, y2)).

    Returns:
        (class_id, confidence, is_true_positive) per detection. Each detection,
        in descending confidence, takes the highest-IoU unmatched ground truth
        of its class with IoU >= ``iou_thr`` (the first one on ties).
        Equal confidences are ordered by class and box corners.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1], dets[i][0], tuple(dets[i][2])))
    used = [False] * len(gts)
    out = []
    for i in order:
        cls, conf, box = dets[i]
        best, best_j = -1.0, -1
        for j, (gcls, gbox) in enumerate(gts):
            if used[j] or gcls != cls:
                continue
            iou = iou_box(box, gbox)
            if iou >= iou_thr and iou > best:
                best, best_j = iou, j
        if best_j >= 0:
            used[best_j] = True
        out.append((int(cls), float(conf), best_j >= 0))
    return out


def ap_from_records(confs: np.ndarray, tps: np.ndarray, n_gt: int) -> tuple[float, float]:
    """All-points interpolated AP and final recall for one class.

    Detections sharing a confidence enter the PR curve together, so AP does
    not depend on how ties are ordered.
    """
    if n_gt == 0:
        return float("nan"), float("nan")
    if len(confs) == 0:
        return 0.0, 0.0
    order = np.argsort(-confs, kind="stable")
    confs, tps = confs[order], tps[order].astype(np.float64)
    ctp = np.cumsum(tps)
    cfp = np.cumsum(1.0 - tps)
    last = np.r_[np.nonzero(np.diff(confs))[0], len(confs) - 1]
    recall = ctp[last] / n_gt
    precision = ctp[last] / (ctp[last] + cfp[last])
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([[0.0], precision])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    ap = float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))
    return ap, float(recall[-1])


@dataclass
class DetectionState:
    """Per-class match records from disjoint images; merging concatenates."""

    records: dict[int, list[tuple[float, bool]]] = field(default_factory=dict)
    n_gt: dict[int, int] = field(default_factory=dict)

    def add_image(self, dets, gts) -> None:
        for cls, conf, tp in match_image(dets, gts):
            self.records.setdefault(cls, []).append((conf, tp))
        for cls, _ in gts:
            self.n_gt[int(cls)] = self.n_gt.get(int(cls), 0) + 1

    def merge(self, other: "DetectionState") -> "DetectionState":
        out = DetectionState({k: list(v) for k, v in self.records.items()}, dict(self.n_gt))
        for k, v in other.records.items():
            out.records.setdefault(k, []).extend(v)
        for k, v in other.n_gt.items():
            out.n_gt[k] = out.n_gt.get(k, 0) + v
        return out

    def summarize(self, recall_conf: float = 0.001) -> tuple[float, float, dict[int, dict]]:
        per_class = {}
        for cls in sorted(set(self.n_gt) | set(self.records)):
            recs = sorted(self.records.get(cls, []))
            confs = np.array([c for c, _ in recs], dtype=np.float64)
            tps = np.array([t for _, t in recs], dtype=bool)
            n_gt = self.n_gt.get(cls, 0)
            ap, _ = ap_from_records(confs, tps, n_gt)
            above = confs >= recall_conf
            recall = float(tps[above].sum() / n_gt) if n_gt else float("nan")
            per_class[cls] = {"ap50": ap, "recall": recall, "num_gt": n_gt, "num_det": len(recs)}
        valid = [v for v in per_class.values() if v["num_gt"] > 0]
        excluded = [k for k, v in per_class.items() if v["num_gt"] == 0]
        if excluded:
            log.info("classes without ground truth excluded from mAP: %s", excluded)
        if not valid:
            return 0.0, 0.0, per_class
        return (
            float(np.mean([v["ap50"] for v in valid])),
            float(np.mean([v["recall"] for v in valid])),
            per_class,
        )


def average_precision_50(dets_per_image, gts_per_image, recall_conf: float = 0.001) -> tuple[float, float]:
    """mAP at IoU 0.5 and recall over a set of images.

    Args:
        dets_per_image: per image, a sequence of (class_id, confidence, box).
        gts_per_image: per image, a sequence of (class_id, box).
    """
    state = DetectionState()
    for dets, gts in zip(dets_per_image, gts_per_image):
        state.add_image(dets, gts)
    m, r, _ = state.summarize(recall_conf)
    return m, r


def confusion_2class(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """[[TN, FP], [FN, TP]] counts, rows = ground truth, cols = prediction."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise MetricError(f"prediction shape {pred.shape} != ground truth {gt.shape}")
    p = pred.astype(bool).ravel()
    g = gt.astype(bool).ravel()
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = p.size - tp - fp - fn
    return np.array([[tn, fp], [fn, tp]], dtype=np.int64)


def miou_from_confusion(cm: np.ndarray) -> tuple[float, list[float]]:
    ious = []
    for c in (0, 1):
        tp = cm[c, c]
        denom = cm[c, :].sum() + cm[:, c].sum() - tp
        ious.append(float(tp / denom) if denom else float("nan"))
    valid = [v for v in ious if not np.isnan(v)]
    return (float(np.mean(valid)) if valid else float("nan")), ious


def mean_iou_seg(preds, gts) -> float:
    """mIoU over {background, foreground} from confusion counts accumulated over all masks."""
    cm = np.zeros((2, 2), np.int64)
    for p, g in zip(preds, gts):
        cm += confusion_2class(p, g)
    return miou_from_confusion(cm)[0]


def lane_from_confusion(cm: np.ndarray) -> tuple[float, float]:
    tp, fn, fp = cm[1, 1], cm[1, 0], cm[0, 1]
    if tp + fn == 0:
        return float("nan"), float("nan")
    return float(tp / (tp + fn)), float(tp / (tp + fp + fn))


def lane_metrics(preds, gts) -> tuple[float, float]:
    """(accuracy, lane IoU): lane-pixel recall TP/(TP+FN) and foreground IoU.

    Both are NaN when the ground truth holds no lane pixels.
    """
    cm = np.zeros((2, 2), np.int64)
    for p, g in zip(preds, gts):
        cm += confusion_2class(p, g)
    return lane_from_confusion(cm)


@dataclass
class MetricReport:
    map50: float = 0.0
    recall: float = 0.0
    drivable_miou: float = float("nan")
    lane_accuracy: float = float("nan")
    lane_iou: float = float("nan")
    fps: float = 0.0
    param_count: int = 0
    num_images: int = 0
    per_class: dict = field(default_factory=dict)
    per_image: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def to_json(self) -> dict:
        d = asdict(self)
        d["per_class"] = {str(k): v for k, v in self.per_class.items()}
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    def table(self) -> str:
        cols = [
            ("mAP50", self.map50), ("Recall", self.recall), ("Drivable mIoU", self.drivable_miou),
            ("Accuracy", self.lane_accuracy), ("Lane IoU", self.lane_iou),
            ("Speed(fps)", self.fps), ("Params", self.param_count),
        ]
        head = " | ".join(f"{n:>13}" for n, _ in cols)
        row = " | ".join(f"{_fmt(n, v):>13}" for n, v in cols)
        return f"{head}\n{'-' * len(head)}\n{row}"


def _fmt(name: str, v) -> str:
    if name == "Params":
        return f"{v / 1e6:.2f}M"
    if name == "Speed(fps)":
        return f"{v:.1f}"
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return "n/a"
    return f"{100 * v:.1f}"


@dataclass
class EvalState:
    """Everything needed to produce a MetricReport, mergeable across image shards."""

    image_ids: set = field(default_factory=set)
    detection: DetectionState = field(default_factory=DetectionState)
    drivable_cm: np.ndarray = field(default_factory=lambda: np.zeros((2, 2), np.int64))
    lane_cm: np.ndarray = field(default_factory=lambda: np.zeros((2, 2), np.int64))
    per_image: dict = field(default_factory=dict)

    def add_image(self, image_id, dets, gts, drivable_pred, drivable_gt, lane_pred, lane_gt) -> None:
        if image_id in self.image_ids:
            raise MetricError(f"image {image_id!r} added twice")
        self.image_ids.add(image_id)
        self.detection.add_image(dets, gts)
        dcm = confusion_2class(drivable_pred, drivable_gt)
        lcm = confusion_2class(lane_pred, lane_gt)
        self.drivable_cm += dcm
        self.lane_cm += lcm
        self.per_image[image_id] = {
            "num_det": len(dets),
            "num_gt": len(gts),
            "drivable_miou": miou_from_confusion(dcm)[0],
            "lane_iou": lane_from_confusion(lcm)[1],
        }

    def merge(self, other: "EvalState") -> "EvalState":
        overlap = self.image_ids & other.image_ids
        if overlap:
            raise MetricError(f"overlapping image ids in merge: {sorted(overlap)[:5]}")
        return EvalState(
            self.image_ids | other.image_ids,
            self.detection.merge(other.detection),
            self.drivable_cm + other.drivable_cm,
            self.lane_cm + other.lane_cm,
            {**self.per_image, **other.per_image},
        )

    def report(self, recall_conf: float = 0.001) -> MetricReport:
        if not self.image_ids:
            return MetricReport(notes=["empty evaluation set"])
        m, r, per_class = self.detection.summarize(recall_conf)
        acc, liou = lane_from_confusion(self.lane_cm)
        notes = [f"class {k} has no ground truth; excluded from mAP" for k, v in per_class.items() if v["num_gt"] == 0]
        if np.isnan(acc):
            notes.append("no lane ground-truth pixels; lane metrics undefined")
        return MetricReport(
            map50=m,
            recall=r,
            drivable_miou=miou_from_confusion(self.drivable_cm)[0],
            lane_accuracy=acc,
            lane_iou=liou,
            num_images=len(self.image_ids),
            per_class=per_class,
            per_image=dict(sorted(self.per_image.items())),
            notes=notes,
        )


def merge_reports(parts: list[EvalState]) -> MetricReport:
    """Combine evaluation states from disjoint image subsets into one report."""
    state = EvalState()
    for part in parts:
        state = state.merge(part)
    return state.report()
