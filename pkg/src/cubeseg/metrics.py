"""Confusion-matrix segmentation metrics: per-class IoU, MeanIoU, P/R, macro F1.

Counts stay integral until the final division.  A class with an empty
denominator is *undefined* (NaN) and is left out of every average.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .errors import EmptyMetricError, ShapeError

REPORT_VERSION = 1


class ConfusionMatrix:
    """``counts[t, p]``: pixels of true class ``t`` predicted as ``p``."""

    def __init__(self, counts):
        counts = np.asarray(counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ShapeError(f"confusion matrix must be square, got {counts.shape}")
        if (counts < 0).any():
            raise ValueError("confusion counts must be non-negative")
        self.counts = counts

    @classmethod
    def zeros(cls, num_classes):
        return cls(np.zeros((num_classes, num_classes), np.int64))

    @property
    def num_classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def tp(self):
        return np.diag(self.counts)

    @property
    def fp(self):
        return self.counts.sum(axis=0) - self.tp

    @property
    def fn(self):
        return self.counts.sum(axis=1) - self.tp

    def __add__(self, other):
        return ConfusionMatrix(self.counts + other.counts)

    def __iadd__(self, other):
        self.counts = self.counts + other.counts
        return self

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)


def confusion(pred_mask, true_mask, num_classes: int) -> ConfusionMatrix:
    pred = np.asarray(pred_mask)
    true = np.asarray(true_mask)
    if pred.shape != true.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {true.shape} differ in shape")
    for name, m in (("prediction", pred), ("truth", true)):
        if m.size and (m.min() < 0 or m.max() >= num_classes):
            raise ValueError(f"{name} labels must lie in [0, {num_classes})")
    flat = true.astype(np.int64).ravel() * num_classes + pred.astype(np.int64).ravel()
    counts = np.bincount(flat, minlength=num_classes * num_classes)
    return ConfusionMatrix(counts.reshape(num_classes, num_classes))


def _ratio(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.int64)
    out = np.full(num.shape, np.nan)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out


def iou_per_class(cm: ConfusionMatrix) -> np.ndarray:
    return _ratio(cm.tp, cm.tp + cm.fp + cm.fn)


def _defined_mean(values, exclude=()):
    values = np.array(values, dtype=np.float64)
    for c in exclude:
        values[c] = np.nan
    defined = values[~np.isnan(values)]
    if defined.size == 0:
        raise EmptyMetricError("no class is defined; cannot average")
    return float(defined.mean())


def mean_iou(cm: ConfusionMatrix, include_background: bool = True) -> float:
    return _defined_mean(iou_per_class(cm), () if include_background else (0,))


def precision_recall(cm: ConfusionMatrix):
    tp = cm.tp
    return _ratio(tp, tp + cm.fp), _ratio(tp, tp + cm.fn)


def f1_macro(cm: ConfusionMatrix, include_background: bool = True):
    """Per-class F1 and its macro average.

    From counts, F1 = 2TP / (2TP + FP + FN), which equals the harmonic mean
    of precision and recall whenever both exist and is 0 for a class that is
    present but never hit.
    """
    tp = cm.tp
    f1 = _ratio(2 * tp, 2 * tp + cm.fp + cm.fn)
    return f1, _defined_mean(f1, () if include_background else (0,))


@dataclass
class MetricsReport:
    per_class_iou: List[Optional[float]]
    mean_iou: float
    per_class_precision: List[Optional[float]]
    per_class_recall: List[Optional[float]]
    per_class_f1: List[Optional[float]]
    macro_f1: float
    num_pixels: int
    undefined_classes: List[int]
    class_names: List[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "format_version": REPORT_VERSION,
            "summary": {"mean_iou": self.mean_iou, "macro_f1": self.macro_f1, "num_pixels": self.num_pixels},
            "undefined_classes": list(self.undefined_classes),
            "per_class": [
                {"class": c, "name": self.class_names[c] if c < len(self.class_names) else str(c),
                 "iou": self.per_class_iou[c], "precision": self.per_class_precision[c],
                 "recall": self.per_class_recall[c], "f1": self.per_class_f1[c]}
                for c in range(len(self.per_class_iou))
            ],
            "meta": self.meta,
        }

    def dumps(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d):
        if d.get("format_version") != REPORT_VERSION:
            raise ValueError(f"unsupported report version {d.get('format_version')!r}")
        rows = sorted(d["per_class"], key=lambda r: r["class"])
        return cls(
            per_class_iou=[r["iou"] for r in rows],
            mean_iou=d["summary"]["mean_iou"],
            per_class_precision=[r["precision"] for r in rows],
            per_class_recall=[r["recall"] for r in rows],
            per_class_f1=[r["f1"] for r in rows],
            macro_f1=d["summary"]["macro_f1"],
            num_pixels=d["summary"]["num_pixels"],
            undefined_classes=list(d["undefined_classes"]),
            class_names=[r["name"] for r in rows],
            meta=d.get("meta", {}),
        )

    @classmethod
    def loads(cls, text):
        return cls.from_dict(json.loads(text))

    def render_table(self):
        def fmt(v):
            return "   -  " if v is None else f"{v:.4f}"

        lines = [f"{'class':>5}  {'name':<12} {'IoU':>6} {'Prec':>6} {'Rec':>6} {'F1':>6}"]
        for c, name in enumerate(self.class_names or [str(i) for i in range(len(self.per_class_iou))]):
            lines.append(f"{c:>5}  {name:<12} {fmt(self.per_class_iou[c])} {fmt(self.per_class_precision[c])} "
                         f"{fmt(self.per_class_recall[c])} {fmt(self.per_class_f1[c])}")
        lines.append(f"MeanIoU {self.mean_iou:.4f}   macro-F1 {self.macro_f1:.4f}   pixels {self.num_pixels}")
        if self.undefined_classes:
            lines.append(f"undefined classes: {self.undefined_classes}")
        return "\n".join(lines) + "\n"


def _as_list(values):
    return [None if np.isnan(v) else float(v) for v in values]


def report(cm: ConfusionMatrix, class_names: Sequence[str] = (), include_background: bool = True,
           meta: Optional[dict] = None) -> MetricsReport:
    iou = iou_per_class(cm)
    p, r = precision_recall(cm)
    f1, macro = f1_macro(cm, include_background)
    return MetricsReport(
        per_class_iou=_as_list(iou),
        mean_iou=mean_iou(cm, include_background),
        per_class_precision=_as_list(p),
        per_class_recall=_as_list(r),
        per_class_f1=_as_list(f1),
        macro_f1=macro,
        num_pixels=cm.total,
        undefined_classes=[int(c) for c in np.flatnonzero(np.isnan(iou))],
        class_names=list(class_names),
        meta=dict(meta or {}),
    )
