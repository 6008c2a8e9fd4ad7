"""Query-based instance head, instance decoding and semantic assembly.

Class index 0 of ``class_logits`` is the no-object class; indices 1..16 are
tooth categories, so they line up with the columns of the semantic
probability matrix (whose column 0 is gingiva).
"""

from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import torch
import torch.nn as nn

NO_OBJECT = 0


@dataclass
class HeadConfig:
    num_queries: int = 32
    query_dim: int = 128
    num_classes: int = 16
    num_layers: int = 2
    num_heads: int = 4
    ffn_dim: int = 256

    def __post_init__(self):
        if self.query_dim % self.num_heads:
            raise ValueError("query_dim must be divisible by num_heads")


@dataclass
class HeadOutput:
    mask_logits: torch.Tensor  # M x N
    class_logits: torch.Tensor  # M x (C + 1)
    objectness: torch.Tensor  # M, in (0, 1)
    query_features: Optional[torch.Tensor] = None  # M x C_ins
    point_embedding: Optional[torch.Tensor] = None  # N x C_ins

    def detach(self) -> "HeadOutput":
        return HeadOutput(*(None if t is None else t.detach() for t in (
            self.mask_logits, self.class_logits, self.objectness, self.query_features, self.point_embedding)))


@dataclass
class InstancePrediction:
    mask_prob: np.ndarray  # N
    class_dist: np.ndarray  # C + 1, index 0 = no-object
    score: float

    @property
    def category(self) -> int:
        return int(np.argmax(self.class_dist[1:])) + 1

    @property
    def binary_mask(self) -> np.ndarray:
        return self.mask_prob >= 0.5


class CrossAttentionLayer(nn.Module):
    def __init__(self, dim, num_heads, ffn_dim):
        super().__init__()
        self.num_heads = num_heads
        self.norm_q = nn.LayerNorm(dim)
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(dim, dim)
        self.to_v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.norm_ffn = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_dim), nn.ReLU(), nn.Linear(ffn_dim, dim))

    def forward(self, queries, memory):
        m, d = queries.shape
        h = self.num_heads
        q = self.to_q(self.norm_q(queries)).view(m, h, d // h).transpose(0, 1)
        k = self.to_k(memory).view(-1, h, d // h).transpose(0, 1)
        v = self.to_v(memory).view(-1, h, d // h).transpose(0, 1)
        attn = torch.softmax(q @ k.transpose(1, 2) / (d // h) ** 0.5, dim=-1)
        ctx = (attn @ v).transpose(0, 1).reshape(m, d)
        queries = queries + self.out(ctx)
        return queries + self.ffn(self.norm_ffn(queries))


class InstanceHead(nn.Module):
    def __init__(self, in_channels: int, config: Optional[HeadConfig] = None):
        super().__init__()
        self.config = config = config or HeadConfig()
        d = config.query_dim
        self.queries = nn.Parameter(torch.randn(config.num_queries, d) * 0.5)
        self.memory_proj = nn.Sequential(nn.Linear(in_channels, d), nn.LayerNorm(d))
        self.layers = nn.ModuleList(
            CrossAttentionLayer(d, config.num_heads, config.ffn_dim) for _ in range(config.num_layers)
        )
        self.query_norm = nn.LayerNorm(d)
        self.point_embed = nn.Sequential(nn.Linear(in_channels, d), nn.ReLU(), nn.Linear(d, d))
        self.mask_embed = nn.Sequential(nn.Linear(d, d), nn.ReLU(), nn.Linear(d, d))
        self.classifier = nn.Linear(d, config.num_classes + 1)
        self.objectness = nn.Linear(d, 1)

    def forward(self, point_features: torch.Tensor, queries: Optional[torch.Tensor] = None) -> HeadOutput:
        memory = self.memory_proj(point_features)
        q = self.queries if queries is None else queries
        for layer in self.layers:
            q = layer(q, memory)
        q = self.query_norm(q)
        e_pp = self.point_embed(point_features)
        return HeadOutput(
            mask_logits=self.mask_embed(q) @ e_pp.T,
            class_logits=self.classifier(q),
            objectness=torch.sigmoid(self.objectness(q)).squeeze(-1),
            query_features=q,
            point_embedding=e_pp,
        )


def head_forward(point_features, queries, weights: InstanceHead) -> HeadOutput:
    """Run ``weights`` with ``queries`` substituted for its learned queries."""
    point_features = torch.as_tensor(point_features)
    queries = torch.as_tensor(queries, dtype=point_features.dtype)
    if queries.shape[1] != weights.config.query_dim:
        raise ValueError(f"queries must have {weights.config.query_dim} columns")
    if point_features.shape[1] != weights.point_embed[0].in_features:
        raise ValueError("point feature width does not match the head")
    return weights(point_features, queries)


def binary_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def mask_nms(predictions: List[InstancePrediction], iou_threshold: float = 0.5) -> List[int]:
    """Greedy mask NMS. Returns kept indices by descending score
    (equal scores keep the original order)."""
    order = sorted(range(len(predictions)), key=lambda i: (-predictions[i].score, i))
    masks = [p.binary_mask for p in predictions]
    kept: List[int] = []
    for i in order:
        if all(binary_iou(masks[i], masks[j]) < iou_threshold for j in kept):
            kept.append(i)
    return kept


def decode_instances(
    head: HeadOutput,
    objectness_floor: float = 0.3,
    class_floor: float = 0.3,
    nms_iou: float = 0.5,
) -> List[InstancePrediction]:
    mask_prob = torch.sigmoid(head.mask_logits).detach().double().numpy()
    class_dist = torch.softmax(head.class_logits.detach().double(), dim=-1).numpy()
    objectness = head.objectness.detach().double().numpy()
    candidates = []
    for m in range(class_dist.shape[0]):
        dist = class_dist[m]
        tooth_prob = dist[1:].max()
        score = float(objectness[m] * tooth_prob)
        if int(np.argmax(dist)) == NO_OBJECT:
            continue
        if score < objectness_floor or tooth_prob < class_floor:
            continue
        candidates.append(InstancePrediction(mask_prob[m], dist, score))
    return [candidates[i] for i in mask_nms(candidates, nms_iou)]


def assemble_semantic_probs(
    predictions: List[InstancePrediction], n_points: int, gingiva_floor: float = 0.05, num_classes: int = 16
) -> np.ndarray:
    """N x (C+1) per-point distribution: score-weighted tooth votes plus a
    residual gingiva column, rows normalised."""
    tooth = np.zeros((n_points, num_classes))
    for p in predictions:
        tooth += p.score * np.outer(p.mask_prob, p.class_dist[1:])
    gingiva = np.maximum(gingiva_floor, 1.0 - tooth.sum(axis=1))
    probs = np.concatenate([gingiva[:, None], tooth], axis=1)
    return probs / probs.sum(axis=1, keepdims=True)


def semantic_probs_from_head(head: HeadOutput, gingiva_floor: float = 0.05) -> torch.Tensor:
    """Differentiable counterpart of :func:`assemble_semantic_probs` over all
    queries, used to feed the boundary loss during training."""
    mask_prob = torch.sigmoid(head.mask_logits)
    class_dist = torch.softmax(head.class_logits, dim=-1)
    score = head.objectness * class_dist[:, 1:].max(dim=-1).values
    tooth = mask_prob.T @ (score[:, None] * class_dist[:, 1:])
    gingiva = torch.clamp(1.0 - tooth.sum(dim=1), min=gingiva_floor)
    probs = torch.cat([gingiva[:, None], tooth], dim=1)
    return probs / probs.sum(dim=1, keepdim=True)
