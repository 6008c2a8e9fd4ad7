"""Backbone + instance head, and per-scan sample preparation."""

from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import torch
import torch.nn as nn

from .backbone import PointBackbone, PointHierarchy, build_hierarchy
from .config import Config
from .data.scan import Scan, build_input_features
from .geometry import extract_boundary_set
from .head import HeadOutput, InstanceHead, assemble_semantic_probs, decode_instances
from .losses import GroundTruthInstance, ground_truth_instances


@dataclass
class Sample:
    """Everything the network and the losses need for one scan."""

    scan: Scan
    features: torch.Tensor
    hierarchy: PointHierarchy
    gts: List[GroundTruthInstance]
    boundary: np.ndarray

    @property
    def labels(self):
        return self.scan.categories


def normalize_features(features: np.ndarray, coord_scale: float) -> np.ndarray:
    """Centre the 12 coordinate columns on the scan centroid and rescale them;
    normal columns are left untouched."""
    out = np.array(features, dtype=np.float64)
    centroid = out[:, :3].mean(axis=0)
    coord_cols = [0, 1, 2, 6, 7, 8, 9, 10, 11, 12, 13, 14]
    out[:, coord_cols] = (out[:, coord_cols] - np.tile(centroid, 4)) / coord_scale
    return out


def prepare_sample(scan: Scan, config: Config) -> Sample:
    feats = normalize_features(build_input_features(scan), config.data.coord_scale)
    return Sample(
        scan=scan,
        features=torch.as_tensor(feats, dtype=torch.float32),
        hierarchy=build_hierarchy(scan.points.coords, config.backbone),
        gts=ground_truth_instances(scan.instance_ids, scan.categories),
        boundary=extract_boundary_set(scan.points, scan.instance_ids, config.loss.boundary_k),
    )


class ToothInstanceNet(nn.Module):
    def __init__(self, config: Optional[Config] = None):
        super().__init__()
        self.config = config = config or Config()
        self.backbone = PointBackbone(config.backbone)
        self.head = InstanceHead(config.backbone.output_channels, config.head)

    def forward(self, sample: Sample) -> HeadOutput:
        return self.head(self.backbone(sample.features, sample.hierarchy))

    @torch.no_grad()
    def predict(self, sample: Sample):
        """Decoded instances and the assembled N x 17 semantic distribution."""
        was_training = self.training
        self.eval()
        try:
            out = self(sample)
        finally:
            self.train(was_training)
        inf = self.config.inference
        instances = decode_instances(out, inf.objectness_floor, inf.class_floor, inf.nms_iou)
        probs = assemble_semantic_probs(instances, len(sample.scan), inf.gingiva_floor, self.config.head.num_classes)
        return instances, probs

    def state_arrays(self):
        return {f"model/{k}": v.detach().numpy() for k, v in self.state_dict().items()}

    def load_state_arrays(self, arrays):
        state = {k[len("model/"):]: torch.from_numpy(np.array(v)) for k, v in arrays.items() if k.startswith("model/")}
        self.load_state_dict(state)
