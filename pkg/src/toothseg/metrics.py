"""Point-wise semantic scores and instance-level average precision."""

from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

AP_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
REPORT_THRESHOLDS = (0.5, 0.7, 0.9)


@dataclass
class SemanticScores:
    oa: float
    macc: float
    miou: float
    per_class_iou: np.ndarray
    per_class_dice: np.ndarray = field(default=None, repr=False)


@dataclass
class ScoredInstance:
    mask: np.ndarray  # N booleans
    score: float


@dataclass
class APResult:
    ap_at: Dict[float, float]
    map_value: float


def confusion_matrix(pred, gt, num_classes: int) -> np.ndarray:
    """Rows are ground truth, columns predictions."""
    idx = gt * num_classes + pred
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def semantic_metrics(pred, gt, num_classes: int = 17) -> SemanticScores:
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction length {pred.shape} != ground truth length {gt.shape}")
    if len(gt) and (min(pred.min(), gt.min()) < 0 or max(pred.max(), gt.max()) >= num_classes):
        raise ValueError("labels out of range")
    cm = confusion_matrix(pred, gt, num_classes)
    tp = np.diag(cm).astype(np.float64)
    gt_count = cm.sum(axis=1)
    pred_count = cm.sum(axis=0)
    union = gt_count + pred_count - tp
    present = union > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(present, tp / union, np.nan)
        recall = np.where(gt_count > 0, tp / gt_count, np.nan)
        dice = np.where(present, 2 * tp / (gt_count + pred_count), np.nan)
    # classes seen only in the prediction have no defined recall
    return SemanticScores(
        oa=float(tp.sum() / max(len(gt), 1)),
        macc=float(np.nanmean(recall)) if np.isfinite(recall).any() else 0.0,
        miou=float(np.nanmean(iou)) if present.any() else 0.0,
        per_class_iou=iou,
        per_class_dice=dice,
    )


def mask_iou_matrix(pred_masks, gt_masks) -> np.ndarray:
    if len(pred_masks) == 0 or len(gt_masks) == 0:
        return np.zeros((len(pred_masks), len(gt_masks)))
    p = np.asarray(pred_masks, dtype=np.float64)
    g = np.asarray(gt_masks, dtype=np.float64)
    inter = p @ g.T
    union = p.sum(1)[:, None] + g.sum(1)[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def average_precision(tp_flags: Sequence[bool], n_gt: int, interpolation: str = "all-point") -> float:
    """Area under the interpolated precision-recall curve of a score-ordered
    TP/FP sequence."""
    if n_gt == 0:
        return 0.0 if len(tp_flags) else 1.0
    if len(tp_flags) == 0:
        return 0.0
    flags = np.asarray(tp_flags, dtype=np.float64)
    tp = np.cumsum(flags)
    fp = np.cumsum(1.0 - flags)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    if interpolation == "all-point":
        envelope = np.maximum.accumulate(precision[::-1])[::-1]
        steps = np.diff(np.concatenate([[0.0], recall]))
        return float((steps * envelope).sum())
    if interpolation == "101-point":
        samples = np.linspace(0, 1, 101)
        vals = [precision[recall >= r].max() if (recall >= r).any() else 0.0 for r in samples]
        return float(np.mean(vals))
    raise ValueError(f"unknown interpolation {interpolation!r}")


def match_by_score(preds: List[ScoredInstance], gt_masks, threshold: float) -> List[bool]:
    """Greedy matching in descending score order; a prediction claims the
    unclaimed ground truth with the highest IoU and is a TP iff that IoU
    strictly exceeds ``threshold``."""
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    ious = mask_iou_matrix([preds[i].mask for i in order], gt_masks)
    claimed = np.zeros(len(gt_masks), dtype=bool)
    flags = []
    for row in ious:
        if claimed.all():
            flags.append(False)
            continue
        cand = np.where(claimed, -1.0, row)
        best = int(np.argmax(cand))
        hit = cand[best] > threshold
        if hit:
            claimed[best] = True
        flags.append(bool(hit))
    return flags


def _gt_masks(gts):
    return [np.asarray(g.mask if hasattr(g, "mask") else g, dtype=bool) for g in gts]


def instance_ap(preds: List[ScoredInstance], gts, threshold: float, interpolation: str = "all-point") -> float:
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    masks = _gt_masks(gts)
    return average_precision(match_by_score(preds, masks, threshold), len(masks), interpolation)


def mean_ap(preds: List[ScoredInstance], gts, thresholds=AP_THRESHOLDS, interpolation: str = "all-point") -> APResult:
    ap_at = {t: instance_ap(preds, gts, t, interpolation) for t in thresholds}
    for t in REPORT_THRESHOLDS:
        if t not in ap_at:
            ap_at[t] = instance_ap(preds, gts, t, interpolation)
    return APResult(ap_at, float(np.mean([ap_at[t] for t in thresholds])))


def semantic_as_instances(labels, scores=None) -> List[ScoredInstance]:
    """One instance per predicted tooth class (gingiva, label 0, excluded)."""
    labels = np.asarray(labels)
    out = []
    for c in np.unique(labels):
        if c == 0:
            continue
        out.append(ScoredInstance(labels == c, 1.0 if scores is None else float(scores[c])))
    return out
