"""Label spaces and the on-disk dataset manifest."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional

from .errors import ConfigError, NotFoundError, WriteError

MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class LabelSpace:
    mode: str
    num_classes: int
    class_names: tuple

    def __post_init__(self):
        if (self.num_classes == 4) != (self.mode == "semantic4"):
            raise ConfigError(f"label space {self.mode!r} cannot have {self.num_classes} classes")
        if self.class_names[0] != "background":
            raise ConfigError("class 0 must be 'background'")

    @classmethod
    def semantic4(cls):
        return cls("semantic4", 4, ("background", "foundation", "walls", "roof"))

    @classmethod
    def percube44(cls):
        return cls("percube44", 44, ("background",) + tuple(f"cube_{i}" for i in range(1, 44)))

    @classmethod
    def from_mode(cls, mode):
        if mode == "semantic4":
            return cls.semantic4()
        if mode == "percube44":
            return cls.percube44()
        raise ConfigError(f"dataset.label_space: unknown mode {mode!r}")

    def to_dict(self):
        return {"mode": self.mode, "num_classes": self.num_classes, "class_names": list(self.class_names)}


@dataclass(frozen=True)
class SampleRecord:
    id: str
    house: str
    stage: str
    angle: int
    knockout_ids: tuple
    knockout_plan: int
    label_space_mode: str
    num_classes: int
    image: str
    mask: str
    base_id: str = ""
    aug_index: int = 0
    aug_ops: tuple = ()
    split: Optional[str] = None

    @property
    def group_key(self):
        """Base-scene key shared by a scene and all of its augmented copies."""
        return (self.house, self.stage, self.angle, self.knockout_plan)

    def to_dict(self):
        d = asdict(self)
        d["knockout_ids"] = list(self.knockout_ids)
        d["aug_ops"] = list(self.aug_ops)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["knockout_ids"] = tuple(d.get("knockout_ids", ()))
        d["aug_ops"] = tuple(d.get("aug_ops", ()))
        return cls(**d)


@dataclass
class DatasetManifest:
    samples: List[SampleRecord]
    seed: int
    label_space: LabelSpace
    root: Optional[Path] = None
    config_hash: str = ""
    split_fractions: Optional[tuple] = None

    @property
    def splits(self) -> Dict[str, Optional[str]]:
        return {s.id: s.split for s in self.samples}

    def select(self, split):
        return [s for s in self.samples if s.split == split]

    def with_samples(self, samples, **changes):
        return replace(self, samples=list(samples), **changes)

    def split_counts(self):
        counts = {k: 0 for k in SPLITS}
        for s in self.samples:
            if s.split in counts:
                counts[s.split] += 1
        return counts

    def to_dict(self):
        return {
            "format_version": MANIFEST_VERSION,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "label_space": self.label_space.to_dict(),
            "split_fractions": list(self.split_fractions) if self.split_fractions else None,
            "samples": [s.to_dict() for s in sorted(self.samples, key=lambda s: s.id)],
        }

    def dumps(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def write(self, root=None):
        root = Path(root or self.root)
        path = root / "manifest.json"
        try:
            root.mkdir(parents=True, exist_ok=True)
            path.write_text(self.dumps())
        except OSError as exc:
            raise WriteError(f"cannot write {path}: {exc}", path=path) from exc
        return path


def read_manifest(root) -> DatasetManifest:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise NotFoundError(f"no dataset manifest at {path}")
    d = json.loads(path.read_text())
    if d.get("format_version") != MANIFEST_VERSION:
        raise ConfigError(f"{path}: unsupported manifest version {d.get('format_version')!r}")
    ls = d["label_space"]
    return DatasetManifest(
        samples=[SampleRecord.from_dict(s) for s in d["samples"]],
        seed=d["seed"],
        label_space=LabelSpace(ls["mode"], ls["num_classes"], tuple(ls["class_names"])),
        root=root,
        config_hash=d.get("config_hash", ""),
        split_fractions=tuple(d["split_fractions"]) if d.get("split_fractions") else None,
    )
