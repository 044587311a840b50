"""Rendered artifacts: learning curves, prediction panels, comparison tables."""
from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image, ImageDraw  # noqa: E402

from .metrics import MetricsReport  # noqa: E402

GOLDEN = 0.618033988749895
SEMANTIC4_COLORS = [(0, 0, 0), (230, 80, 60), (60, 160, 230), (250, 200, 40)]

# Reference scores on photographed build datasets (I: 4 classes, II: 44 classes).
# Shown for context only; synthetic runs are not expected to match.
REFERENCE_ROWS = [
    {"model": "U-Net (light)", "dataset": "I", "mean_iou": 0.7789, "macro_f1": 0.8720},
    {"model": "LinkNet", "dataset": "I", "mean_iou": 0.6118, "macro_f1": 0.7478},
    {"model": "PSPNet", "dataset": "I", "mean_iou": 0.6116, "macro_f1": 0.7480},
    {"model": "U-Net (light)", "dataset": "II", "mean_iou": 0.1652, "macro_f1": 0.2508},
    {"model": "LinkNet", "dataset": "II", "mean_iou": 0.0851, "macro_f1": 0.1955},
    {"model": "PSPNet", "dataset": "II", "mean_iou": 0.1068, "macro_f1": 0.1665},
]


def palette(num_classes: int) -> np.ndarray:
    """Fixed class colours; class 0 is black.

    4-class masks use four hand-picked colours.  Otherwise hues step by the
    golden ratio so consecutive cube ids land far apart on the colour wheel,
    with value alternating between two levels.
    """
    if num_classes <= 4:
        return np.array(SEMANTIC4_COLORS[:num_classes], np.uint8)
    colors = [(0, 0, 0)]
    for i in range(1, num_classes):
        h = (i * GOLDEN) % 1.0
        v = 0.95 if i % 2 else 0.7
        r, g, b = colorsys.hsv_to_rgb(h, 0.85, v)
        colors.append((round(r * 255), round(g * 255), round(b * 255)))
    return np.array(colors, np.uint8)


def colorize(mask: np.ndarray, num_classes: int) -> np.ndarray:
    return palette(num_classes)[np.asarray(mask)]


def prediction_panel(image, pred_mask, num_classes: int, truth_mask=None, class_names: Sequence[str] = (),
                     legend_height: int = 18) -> Image.Image:
    """Side-by-side input | prediction [| truth] with a legend strip below."""
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[-1] == 1:
        image = image[..., 0]
    if image.dtype != np.uint8:
        image = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    rgb = np.stack([image] * 3, -1) if image.ndim == 2 else image
    panels = [rgb, colorize(pred_mask, num_classes)]
    if truth_mask is not None:
        panels.append(colorize(truth_mask, num_classes))
    strip = np.concatenate(panels, axis=1)
    h, w = strip.shape[:2]
    canvas = Image.new("RGB", (w, h + legend_height), (255, 255, 255))
    canvas.paste(Image.fromarray(strip), (0, 0))
    draw = ImageDraw.Draw(canvas)
    colors = palette(num_classes)
    present = sorted(set(np.unique(pred_mask)) | (set(np.unique(truth_mask)) if truth_mask is not None else set()))
    x = 2
    for c in present:
        name = class_names[c] if c < len(class_names) else str(c)
        draw.rectangle([x, h + 4, x + 10, h + 14], fill=tuple(int(v) for v in colors[c]))
        draw.text((x + 13, h + 3), name, fill=(0, 0, 0))
        x += 16 + 6 * len(name)
        if x > w - 20:
            break
    return canvas


def plot_history(history, out_dir, title: str = "") -> List[Path]:
    """Loss and MeanIoU curves (train and validation) as two PNG files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    epochs = np.arange(1, len(history) + 1)
    paths = []
    for name, train, val, ylabel in (
        ("loss", history.train_loss, history.val_loss, "cross-entropy"),
        ("mean_iou", history.train_mean_iou, history.val_mean_iou, "MeanIoU"),
    ):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(epochs, train, label="train")
        if val:
            ax.plot(epochs, val, label="validation")
        ax.set_xlabel("epoch")
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        ax.legend()
        fig.tight_layout()
        path = out_dir / f"{name}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)
    return paths


@dataclass
class ComparisonRow:
    model: str
    dataset: str
    mean_iou: float
    macro_f1: float
    source: str = ""
    note: str = ""


@dataclass
class ComparisonReport:
    rows: List[ComparisonRow] = field(default_factory=list)

    @classmethod
    def from_reports(cls, reports: Sequence[MetricsReport], sources: Sequence[str] = ()):
        rows = []
        for i, rep in enumerate(reports):
            meta = rep.meta or {}
            rows.append(ComparisonRow(
                model=meta.get("arch", "?"),
                dataset=meta.get("label_space", "?"),
                mean_iou=rep.mean_iou,
                macro_f1=rep.macro_f1,
                source=sources[i] if i < len(sources) else "",
            ))
        modes = {r.dataset for r in rows}
        if len(modes) > 1:
            majority = max(sorted(modes), key=lambda m: sum(r.dataset == m for r in rows))
            for r in rows:
                if r.dataset != majority:
                    r.note = "label space differs"
        rows.sort(key=lambda r: r.mean_iou, reverse=True)
        return cls(rows)

    def with_reference(self):
        ref = [ComparisonRow(r["model"], f"reference {r['dataset']}", r["mean_iou"], r["macro_f1"], "reference")
               for r in REFERENCE_ROWS]
        return ComparisonReport(self.rows + ref)

    def render_text(self):
        header = f"{'Model':<16} {'Dataset':<14} {'MeanIoU':>8} {'F1 Score':>9}  Note"
        lines = [header, "-" * len(header)]
        for r in self.rows:
            lines.append(f"{r.model:<16} {r.dataset:<14} {r.mean_iou:>8.4f} {r.macro_f1:>9.4f}  {r.note}".rstrip())
        return "\n".join(lines) + "\n"

    def to_dict(self):
        return {"format_version": 1, "rows": [r.__dict__ for r in self.rows]}

    def dumps(self):
        return json.dumps(self.to_dict(), indent=1) + "\n"

    def render_image(self, path):
        cells = [[r.model, r.dataset, f"{r.mean_iou:.4f}", f"{r.macro_f1:.4f}", r.note] for r in self.rows]
        fig, ax = plt.subplots(figsize=(7, 0.4 * len(cells) + 0.8))
        ax.axis("off")
        table = ax.table(cellText=cells or [["", "", "", "", ""]],
                         colLabels=["Model", "Dataset", "MeanIoU", "F1 Score", "Note"], loc="center")
        table.auto_set_font_size(False)
        table.set_fontsize(9)
        fig.tight_layout()
        fig.savefig(path, dpi=100)
        plt.close(fig)
        return Path(path)
