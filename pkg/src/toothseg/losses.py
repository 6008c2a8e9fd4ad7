"""Set-prediction losses: matching cost, mask/class/objectness terms and the
focal boundary loss evaluated on ground-truth boundary points only."""

from dataclasses import asdict, dataclass
from typing import List, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .head import HeadOutput, NO_OBJECT, semantic_probs_from_head
from .matching import MatchResult, hungarian_match

PROB_FLOOR = 1e-7


@dataclass
class GroundTruthInstance:
    mask: np.ndarray  # N booleans
    category: int  # 1..16


@dataclass
class LossWeights:
    lambda_cls: float = 1.0
    lambda_mask: float = 1.0
    lambda_obj: float = 1.0
    lambda_ibl: float = 0.006

    def __post_init__(self):
        if min(self.lambda_cls, self.lambda_mask, self.lambda_obj, self.lambda_ibl) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossReport:
    total: float
    cls: float
    mask: float
    obj: float
    ibl: float

    def as_dict(self):
        return asdict(self)


def ground_truth_instances(instance_ids, categories) -> List[GroundTruthInstance]:
    """One instance per non-zero instance id, ordered by id."""
    instance_ids = np.asarray(instance_ids)
    categories = np.asarray(categories)
    out = []
    for iid in np.unique(instance_ids):
        if iid == 0:
            continue
        mask = instance_ids == iid
        cats, counts = np.unique(categories[mask], return_counts=True)
        out.append(GroundTruthInstance(mask, int(cats[np.argmax(counts)])))
    return out


def dice_loss(probs: torch.Tensor, target: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    inter = (probs * target).sum(-1)
    return 1.0 - (2.0 * inter + smooth) / (probs.sum(-1) + target.sum(-1) + smooth)


def mask_loss(pred_mask_logits, gt_mask, smooth: float = 1.0) -> torch.Tensor:
    """Mean per-point BCE plus soft Dice for one predicted mask."""
    logits = torch.as_tensor(pred_mask_logits)
    target = torch.as_tensor(np.asarray(gt_mask)).to(logits.dtype)
    bce = F.binary_cross_entropy_with_logits(logits, target)
    return bce + dice_loss(torch.sigmoid(logits), target, smooth)


@torch.no_grad()
def matching_cost(head: HeadOutput, gts: List[GroundTruthInstance]) -> np.ndarray:
    """M x G cost: class NLL + mean mask BCE + Dice, unit weights."""
    m = head.class_logits.shape[0]
    if not gts:
        return np.zeros((m, 0))
    logits = head.mask_logits.double()
    targets = torch.as_tensor(np.stack([g.mask for g in gts]), dtype=torch.float64)  # G x N
    cats = torch.as_tensor([g.category for g in gts], dtype=torch.long)
    cls = -torch.log_softmax(head.class_logits.double(), dim=-1)[:, cats]
    n = logits.shape[1]
    # BCE with logits: softplus(x) - x*y, averaged over points
    bce = (F.softplus(logits).sum(1, keepdim=True) - logits @ targets.T) / n
    probs = torch.sigmoid(logits)
    dice = 1.0 - (2.0 * probs @ targets.T + 1.0) / (probs.sum(1, keepdim=True) + targets.sum(1)[None, :] + 1.0)
    return (cls + bce + dice).numpy()


def instance_boundary_loss(probs, labels, boundary, gamma: float = 2.0) -> torch.Tensor:
    """Focal cross-entropy of the semantic distribution averaged over
    boundary points; zero when there are none."""
    probs = torch.as_tensor(probs)
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    boundary = torch.as_tensor(np.asarray(boundary), dtype=torch.bool)
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    if not bool(boundary.any()):
        return probs.sum() * 0.0
    p = probs[boundary].gather(1, labels[boundary, None]).squeeze(1)
    p_log = torch.clamp(p, min=PROB_FLOOR)
    return -((1.0 - p) ** gamma * torch.log(p_log)).mean()


def classification_and_objectness_loss(
    head: HeadOutput, match: MatchResult, gts: List[GroundTruthInstance], no_object_weight: float = 0.1
):
    m, n_cls = head.class_logits.shape
    target = torch.full((m,), NO_OBJECT, dtype=torch.long)
    matched = torch.zeros(m, dtype=head.objectness.dtype)
    for p, g in match.pairs:
        target[p] = gts[g].category
        matched[p] = 1.0
    weight = torch.ones(n_cls, dtype=head.class_logits.dtype)
    weight[NO_OBJECT] = no_object_weight
    cls = F.cross_entropy(head.class_logits, target, weight=weight)
    obj = F.binary_cross_entropy(head.objectness, matched)
    return cls, obj


def total_loss(components, weights: LossWeights):
    """Weighted sum of the four terms; ``components`` maps cls/mask/obj/ibl
    to floats or tensors. Returns a tensor when given tensors."""
    get = components.__getitem__ if isinstance(components, dict) else lambda k: getattr(components, k)
    return (
        weights.lambda_cls * get("cls")
        + weights.lambda_mask * get("mask")
        + weights.lambda_obj * get("obj")
        + weights.lambda_ibl * get("ibl")
    )


def report(components, weights: LossWeights) -> LossReport:
    vals = {k: float(components[k]) for k in ("cls", "mask", "obj", "ibl")}
    return LossReport(total=float(total_loss(vals, weights)), **vals)


def set_criterion(
    head: HeadOutput,
    gts: List[GroundTruthInstance],
    labels,
    boundary,
    weights: Optional[LossWeights] = None,
    gamma: float = 2.0,
    gingiva_floor: float = 0.05,
    match: Optional[MatchResult] = None,
    no_object_weight: float = 0.1,
):
    """Match, compute all terms and combine them.

    Returns ``(total_tensor, components_dict_of_tensors, match)``.
    """
    weights = weights or LossWeights()
    if match is None:
        match = hungarian_match(matching_cost(head, gts))
    if match.pairs:
        mask_terms = [mask_loss(head.mask_logits[p], torch.as_tensor(gts[g].mask)) for p, g in match.pairs]
        mask = torch.stack(mask_terms).mean()
    else:
        mask = head.mask_logits.sum() * 0.0
    cls, obj = classification_and_objectness_loss(head, match, gts, no_object_weight)
    probs = semantic_probs_from_head(head, gingiva_floor)
    ibl = instance_boundary_loss(probs, labels, boundary, gamma)
    comps = {"cls": cls, "mask": mask, "obj": obj, "ibl": ibl}
    return total_loss(comps, weights), comps, match
