"""U-Net shaped point MLP backbone.

The point hierarchy (FPS samples, kNN groups, interpolation stencils) depends
only on coordinates, so it is computed once per scan in numpy and reused for
every forward pass. The learnable part is plain torch.
"""

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .geometry import farthest_point_sample, knn_indices


@dataclass
class BackboneConfig:
    input_channels: int = 24
    stem_channels: int = 64
    stage_channels: Sequence[int] = (64, 128, 256, 512)
    stage_strides: Sequence[int] = (2, 2, 2, 2)
    k_neighbors: int = 24
    decoder_channels: Sequence[int] = (256, 128, 128, 128)
    affine_mode: str = "scalar"  # "scalar" | "per-channel"
    affine_eps: float = 1e-5

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.stage_strides = tuple(int(s) for s in self.stage_strides)
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        if len(self.stage_channels) != len(self.stage_strides):
            raise ValueError("stage_channels and stage_strides must have equal length")
        if len(self.decoder_channels) != len(self.stage_channels):
            raise ValueError("decoder needs one stage per encoder stage")
        if any(s < 1 for s in self.stage_strides):
            raise ValueError("strides must be >= 1")
        if self.affine_mode not in ("scalar", "per-channel"):
            raise ValueError(f"unknown affine_mode {self.affine_mode!r}")
        if self.affine_eps <= 0:
            raise ValueError("affine_eps must be positive")

    @property
    def output_channels(self) -> int:
        return self.decoder_channels[-1] + sum(self.stage_channels)


@dataclass
class FeatureMap:
    features: torch.Tensor  # N_l x C_l
    coords: np.ndarray  # N_l x 3

    def __post_init__(self):
        if self.features.shape[0] != self.coords.shape[0]:
            raise ValueError("features and coords must have the same number of rows")


@dataclass
class PointHierarchy:
    """Index structure of one scan: level 0 is the full cloud."""

    coords: List[np.ndarray] = field(default_factory=list)
    sample_idx: List[np.ndarray] = field(default_factory=list)  # level l+1 in level l
    group_idx: List[np.ndarray] = field(default_factory=list)  # kNN of level l+1 in level l
    interp_idx: List[np.ndarray] = field(default_factory=list)  # 3-NN of level l in level l+1
    interp_w: List[np.ndarray] = field(default_factory=list)


def interpolation_stencil(coarse_coords, fine_coords, k=3):
    """Inverse-distance weights over the ``k`` nearest coarse points."""
    if len(coarse_coords) == 0:
        raise ValueError("cannot interpolate from an empty coarse set")
    k = min(k, len(coarse_coords))
    idx = knn_indices(coarse_coords, fine_coords, k)
    dist = np.linalg.norm(fine_coords[:, None, :] - coarse_coords[idx], axis=-1)
    w = 1.0 / (dist + 1e-8)
    w /= w.sum(axis=1, keepdims=True)
    return idx, w


def build_hierarchy(coords, config: BackboneConfig, start_index: int = 0) -> PointHierarchy:
    coords = np.asarray(coords, dtype=np.float64)
    h = PointHierarchy(coords=[coords])
    current = coords
    for level, stride in enumerate(config.stage_strides):
        n = len(current)
        m = math.ceil(n / stride)
        if config.k_neighbors > n:
            raise ValueError(f"k={config.k_neighbors} exceeds {n} points at level {level}")
        idx = farthest_point_sample(current, m, start_index if level == 0 else 0)
        sampled = current[idx]
        h.sample_idx.append(idx)
        h.group_idx.append(knn_indices(current, sampled, config.k_neighbors))
        iidx, iw = interpolation_stencil(sampled, current)
        h.interp_idx.append(iidx)
        h.interp_w.append(iw)
        h.coords.append(sampled)
        current = sampled
    return h


def _safe_std(centered: torch.Tensor, dims) -> torch.Tensor:
    # population std; the gradient of sqrt at 0 is replaced by 0
    var = centered.pow(2).mean(dim=dims, keepdim=True)
    positive = var > 0
    return torch.where(positive, torch.sqrt(torch.where(positive, var, torch.ones_like(var))), torch.zeros_like(var))


def geometric_affine(group_features: torch.Tensor, alpha, beta, eps: float = 1e-5, mode: str = "scalar"):
    """Normalise each kNN group and apply a learnable per-channel affine map.

    ``group_features`` is (..., K, C). The mean is taken per channel over the
    K neighbours; in ``scalar`` mode the deviation is one number per group
    over all K x C centred entries, in ``per-channel`` mode one per channel.
    """
    if not torch.isfinite(group_features).all():
        raise ValueError("geometric_affine received non-finite features")
    mean = group_features.mean(dim=-2, keepdim=True)
    centered = group_features - mean
    if mode == "scalar":
        std = _safe_std(centered, (-2, -1))
    elif mode == "per-channel":
        std = _safe_std(centered, (-2,))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return alpha * centered / (std + eps) + beta


class ResidualBlock(nn.Module):
    """Pre-activation residual MLP shared across points."""

    def __init__(self, channels):
        super().__init__()
        self.norm1 = nn.LayerNorm(channels)
        self.fc1 = nn.Linear(channels, channels)
        self.norm2 = nn.LayerNorm(channels)
        self.fc2 = nn.Linear(channels, channels)

    def forward(self, x):
        h = self.fc1(torch.relu(self.norm1(x)))
        h = self.fc2(torch.relu(self.norm2(h)))
        return x + h


class EncoderStage(nn.Module):
    def __init__(self, in_channels, out_channels, affine_mode="scalar", eps=1e-5):
        super().__init__()
        self.alpha = nn.Parameter(torch.ones(in_channels))
        self.beta = nn.Parameter(torch.zeros(in_channels))
        self.affine_mode = affine_mode
        self.eps = eps
        self.transfer = nn.Linear(2 * in_channels, out_channels)
        self.pre = ResidualBlock(out_channels)
        self.post = ResidualBlock(out_channels)

    def forward(self, features, sample_idx, group_idx):
        sample_idx = torch.as_tensor(sample_idx, dtype=torch.long)
        group_idx = torch.as_tensor(group_idx, dtype=torch.long)
        grouped = features[group_idx]  # m x K x C
        normed = geometric_affine(grouped, self.alpha, self.beta, self.eps, self.affine_mode)
        anchor = features[sample_idx].unsqueeze(1).expand_as(normed)
        h = self.pre(self.transfer(torch.cat([normed, anchor], dim=-1)))
        return self.post(h.max(dim=1).values)


def encoder_stage(input: FeatureMap, stride: int, k: int, stage: EncoderStage, start_index: int = 0) -> FeatureMap:
    """Downsample by FPS, group by kNN, normalise, transform and max-pool."""
    n = len(input.coords)
    idx = farthest_point_sample(input.coords, math.ceil(n / stride), start_index)
    groups = knn_indices(input.coords, input.coords[idx], k)
    return FeatureMap(stage(input.features, idx, groups), input.coords[idx])


class DecoderStage(nn.Module):
    def __init__(self, coarse_channels, skip_channels, out_channels):
        super().__init__()
        self.fuse = nn.Linear(coarse_channels + skip_channels, out_channels)
        self.block = ResidualBlock(out_channels)

    def forward(self, coarse_features, interp_idx, interp_w, skip_features):
        up = interpolate(coarse_features, interp_idx, interp_w)
        return self.block(self.fuse(torch.cat([up, skip_features], dim=-1)))


def interpolate(coarse_features, idx, weights):
    idx = torch.as_tensor(idx, dtype=torch.long)
    w = torch.as_tensor(weights, dtype=coarse_features.dtype)
    return (coarse_features[idx] * w.unsqueeze(-1)).sum(dim=1)


def decoder_stage(coarse: FeatureMap, fine_coords, skip: FeatureMap, stage: DecoderStage) -> FeatureMap:
    if not np.array_equal(np.asarray(fine_coords), skip.coords):
        raise ValueError("skip coords must equal fine_coords")
    idx, w = interpolation_stencil(coarse.coords, np.asarray(fine_coords))
    return FeatureMap(stage(coarse.features, idx, w, skip.features), skip.coords)


def global_local_aggregate(encoder_maps, final_decoder) -> torch.Tensor:
    """Append the max-pooled features of every encoder level to each point."""
    if len(encoder_maps) == 0:
        raise ValueError("need at least one encoder map")
    feats = [m.features if isinstance(m, FeatureMap) else m for m in encoder_maps]
    dec = final_decoder.features if isinstance(final_decoder, FeatureMap) else final_decoder
    pooled = torch.cat([f.max(dim=0).values for f in feats])
    return torch.cat([dec, pooled.unsqueeze(0).expand(dec.shape[0], -1)], dim=1)


class PointBackbone(nn.Module):
    def __init__(self, config: Optional[BackboneConfig] = None):
        super().__init__()
        self.config = config = config or BackboneConfig()
        self.stem = nn.Linear(config.input_channels, config.stem_channels)
        self.stem_norm = nn.LayerNorm(config.stem_channels)
        widths = (config.stem_channels,) + config.stage_channels
        self.encoders = nn.ModuleList(
            EncoderStage(widths[i], widths[i + 1], config.affine_mode, config.affine_eps)
            for i in range(len(config.stage_channels))
        )
        # decoder j climbs from level S-j to level S-j-1
        decoders = []
        coarse = widths[-1]
        for j, out in enumerate(config.decoder_channels):
            skip = widths[len(widths) - 2 - j]
            decoders.append(DecoderStage(coarse, skip, out))
            coarse = out
        self.decoders = nn.ModuleList(decoders)

    def forward(self, x: torch.Tensor, hierarchy: PointHierarchy) -> torch.Tensor:
        if x.ndim != 2 or x.shape[1] != self.config.input_channels:
            raise ValueError(f"expected N x {self.config.input_channels} input, got {tuple(x.shape)}")
        if x.shape[0] != len(hierarchy.coords[0]):
            raise ValueError("input rows do not match the point hierarchy")
        h = torch.relu(self.stem_norm(self.stem(x)))
        levels = [h]
        for stage, sidx, gidx in zip(self.encoders, hierarchy.sample_idx, hierarchy.group_idx):
            levels.append(stage(levels[-1], sidx, gidx))
        dec = levels[-1]
        n_stages = len(self.encoders)
        for j, stage in enumerate(self.decoders):
            fine = n_stages - 1 - j
            dec = stage(dec, hierarchy.interp_idx[fine], hierarchy.interp_w[fine], levels[fine])
        return global_local_aggregate(levels[1:], dec)


def backbone_forward(x, config: BackboneConfig, weights: PointBackbone, coords=None, start_index: int = 0):
    """Convenience wrapper: build the hierarchy from the first three input
    columns (or ``coords``) and run the backbone."""
    x = torch.as_tensor(x, dtype=torch.float32)
    if x.shape[1] != config.input_channels:
        raise ValueError(f"expected {config.input_channels} input channels, got {x.shape[1]}")
    if coords is None:
        coords = x[:, :3].detach().double().numpy()
    return weights(x, build_hierarchy(coords, config, start_index))
