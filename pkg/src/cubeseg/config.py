"""Run configuration: a YAML file with dataset / model / train / report sections.

Every key has a default; unknown keys are rejected with their full path.
Defaults: Adam at lr 0.001, batch 16, 100 epochs, dropout 0.1/0.3/0.2,
10% validation and 10% test.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import yaml

from .errors import ConfigError, NotFoundError

AUGMENTATION_OPS = ["CLAHE", "RandomRotate90", "Transpose", "ShiftScaleRotate", "Blur",
                    "OpticalDistortion", "GridDistortion", "HueSaturationValue"]


@dataclass
class RenderSection:
    image_size: int = 192
    cube_px: int = 30
    palette_seed: int = 0
    noise_std: float = 2.5


@dataclass
class AugmentationSection:
    ops: List[str] = field(default_factory=lambda: list(AUGMENTATION_OPS))
    factor: int = 5
    seed: int = 0


@dataclass
class SplitSection:
    fractions: List[float] = field(default_factory=lambda: [0.8, 0.1, 0.1])
    grouped: bool = True
    seed: int = 0


@dataclass
class DatasetSection:
    root: str = "data"
    label_space: str = "semantic4"
    # "builtin" or a path to a YAML/JSON house file
    houses: str = "builtin"
    angles: List[int] = field(default_factory=lambda: [0, 30, 60, 90])
    stages: List[str] = field(default_factory=lambda: ["foundation", "walls", "foundation_and_walls", "full_house"])
    # "default", "none", or {house_name: [[cube ids], ...]}
    knockout_plans: Union[str, Dict[str, List[List[int]]]] = "default"
    # keep only the first N plans per house (null keeps all)
    knockout_limit: Optional[int] = None
    render: RenderSection = field(default_factory=RenderSection)
    augmentation: AugmentationSection = field(default_factory=AugmentationSection)
    split: SplitSection = field(default_factory=SplitSection)
    seed: int = 0


@dataclass
class ModelSection:
    arch: str = "unet_light"
    # null -> 128x128 for unet_light/linknet, 192x192 for pspnet
    input_size: Optional[List[int]] = None
    # null -> taken from the label space
    num_classes: Optional[int] = None
    base_width: int = 16
    dropout: List[float] = field(default_factory=lambda: [0.1, 0.3, 0.2])
    ppm_bins: List[int] = field(default_factory=lambda: [1, 2, 3, 6])


@dataclass
class TrainSection:
    lr: float = 0.001
    batch_size: int = 16
    epochs: int = 100
    seed: int = 0
    checkpoint_dir: str = "checkpoints"


@dataclass
class ReportSection:
    output_dir: str = "reports"
    include_background: bool = True


@dataclass
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    report: ReportSection = field(default_factory=ReportSection)

    def to_dict(self):
        return asdict(self)

    def section_hash(self, *sections):
        d = self.to_dict()
        blob = json.dumps({k: d[k] for k in sections} if sections else d, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def config_hash(self):
        return self.section_hash()

    @property
    def dataset_hash(self):
        return self.section_hash("dataset")


def _build(cls, data, path):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        where = ", ".join(f"{path}.{k}" if path else k for k in unknown)
        raise ConfigError(f"unknown config key(s): {where}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        default = f.default_factory() if f.default_factory is not MISSING else f.default
        sub = f"{path}.{name}" if path else name
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, sub)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(data: Dict[str, Any]) -> RunConfig:
    cfg = _build(RunConfig, data, "")
    validate(cfg)
    return cfg


def _set_path(data, dotted, value):
    keys = dotted.split(".")
    node = data
    for k in keys[:-1]:
        if not isinstance(node.setdefault(k, {}), dict):
            raise ConfigError(f"override {dotted}: {k} is not a section")
        node = node[k]
    node[keys[-1]] = value


def parse_override(text):
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key.path=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def load_config(path=None, overrides=()) -> RunConfig:
    """Read a YAML config (or defaults when ``path`` is None) and apply overrides."""
    data = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise NotFoundError(f"config file {path} not found")
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: cannot parse YAML: {exc}") from exc
    data = copy.deepcopy(data)
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        _set_path(data, key, value)
    return from_dict(data)


def validate(cfg: RunConfig):
    ds = cfg.dataset
    if ds.label_space not in ("semantic4", "percube44"):
        raise ConfigError(f"dataset.label_space: expected semantic4 or percube44, got {ds.label_space!r}")
    bad = [a for a in ds.angles if a not in (0, 30, 60, 90)]
    if bad:
        raise ConfigError(f"dataset.angles: {bad} not in [0, 30, 60, 90]")
    bad = [op for op in ds.augmentation.ops if op not in AUGMENTATION_OPS]
    if bad:
        raise ConfigError(f"dataset.augmentation.ops: unknown augmentation(s) {bad}")
    if len(ds.split.fractions) != 3 or abs(sum(ds.split.fractions) - 1.0) > 1e-9:
        raise ConfigError("dataset.split.fractions: need three fractions summing to 1")
    if not (isinstance(ds.knockout_plans, dict) or ds.knockout_plans in ("default", "none")):
        raise ConfigError("dataset.knockout_plans: expected 'default', 'none' or a mapping")
    if cfg.model.arch not in ("unet_light", "linknet", "pspnet"):
        raise ConfigError(f"model.arch: unknown architecture {cfg.model.arch!r}")
    return cfg


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
