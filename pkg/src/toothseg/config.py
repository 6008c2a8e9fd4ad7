"""Run configuration: one JSON document with a section per stage."""

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Tuple

from .backbone import BackboneConfig
from .head import HeadConfig
from .losses import LossWeights
from .metrics import AP_THRESHOLDS


@dataclass
class LossConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    gamma: float = 2.0
    boundary_k: int = 16
    no_object_weight: float = 0.1
    gingiva_floor: float = 0.05


@dataclass
class InferenceConfig:
    objectness_floor: float = 0.3
    class_floor: float = 0.3
    nms_iou: float = 0.5
    gingiva_floor: float = 0.05


@dataclass
class GraphCutConfig:
    k: int = 8
    smoothing_lambda: float = 2.0
    eps: float = 1e-5
    method: str = "expansion"


@dataclass
class MetricsConfig:
    thresholds: Tuple[float, ...] = AP_THRESHOLDS
    interpolation: str = "all-point"


@dataclass
class DataConfig:
    points: int = 16000
    mirror_categories: bool = False
    coord_scale: float = 20.0  # mm; coordinates are centred and divided by this before the stem


@dataclass
class TrainConfig:
    batch_size: int = 6
    epochs: int = 300
    learning_rate: float = 1e-3
    min_learning_rate: float = 1e-5
    weight_decay: float = 0.0
    seed: int = 0
    checkpoint_every: int = 50
    log_every: int = 1


@dataclass
class Config:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    graphcut: GraphCutConfig = field(default_factory=GraphCutConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "Config":
        return _build(cls, data or {})

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _build(cls, data):
    if not isinstance(data, dict):
        raise ValueError(f"expected an object for {cls.__name__}, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = known[name].default_factory() if known[name].default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def load_config(path=None) -> Config:
    if path is None:
        return Config()
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read config {path}: {exc}") from exc
    return Config.from_dict(data)


def desk_config() -> Config:
    """Narrower backbone and small batches for single-core CPU runs on the
    eight-scan synthetic corpus."""
    cfg = Config()
    cfg.backbone = BackboneConfig(
        stem_channels=32, stage_channels=(32, 64, 128, 256), k_neighbors=16, decoder_channels=(128, 64, 64, 64)
    )
    cfg.data.points = 2048
    cfg.train.epochs = 200
    cfg.train.batch_size = 2
    return cfg
