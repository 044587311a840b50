"""Preprocessing, augmentation, grouped splitting and batching."""
from __future__ import annotations

import logging
import shutil
import zlib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import albumentations as A
import cv2
import numpy as np
from PIL import Image

from .errors import (ConfigError, EmptySplitError, InfeasibleSplitError, LabelRangeError, ShapeError,
                     UnknownLabelError, WriteError)
from .manifest import DatasetManifest
from .scenegen import BACKGROUND_RGB, RenderedSample, load_sample

log = logging.getLogger(__name__)

LUMA = np.array([0.299, 0.587, 0.114])


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """RGB uint8 -> (H, W, 1) uint8 luma, rounded to nearest."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ShapeError(f"expected an (H, W, 3) image, got {image.shape}")
    y = np.rint(image.astype(np.float64) @ LUMA)
    return np.clip(y, 0, 255).astype(np.uint8)[..., None]


def normalize(image: np.ndarray) -> np.ndarray:
    return np.asarray(image, dtype=np.float32) / np.float32(255.0)


def remap_labels(mask: np.ndarray, observed_label_set: Optional[Sequence[int]] = None):
    """Relabel mask values to 0..K-1 by ascending original value.

    Returns ``(remapped, mapping)`` with ``mapping[original] = new``.
    """
    mask = np.asarray(mask)
    if observed_label_set is None:
        observed_label_set = np.unique(mask)
    labels = np.asarray(sorted(int(v) for v in observed_label_set))
    present = np.unique(mask)
    unknown = np.setdiff1d(present, labels)
    if unknown.size:
        raise UnknownLabelError(f"mask values {unknown.tolist()} are not in the observed label set")
    mapping = {int(v): i for i, v in enumerate(labels)}
    remapped = np.searchsorted(labels, mask).astype(mask.dtype if mask.dtype.kind in "iu" else np.int64)
    return remapped, mapping


def one_hot(mask: np.ndarray, num_classes: int) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.size and (mask.min() < 0 or mask.max() >= num_classes):
        raise LabelRangeError(f"mask values must lie in [0, {num_classes}), got range "
                              f"[{mask.min()}, {mask.max()}]")
    return np.eye(num_classes, dtype=np.float32)[mask]


# ------------------------------------------------------------------ splitting


def split_dataset(manifest: DatasetManifest, fractions=(0.8, 0.1, 0.1), seed: int = 0,
                  grouped: bool = True) -> DatasetManifest:
    """Assign train/val/test by base scene so augmented copies never straddle splits.

    Groups are sorted by key before the seeded shuffle, so the result does not
    depend on manifest order.  ``grouped=False`` splits individual samples.
    """
    f_train, f_val, f_test = (float(f) for f in fractions)
    if min(fractions) < 0 or abs(f_train + f_val + f_test - 1.0) > 1e-9:
        raise ConfigError(f"split.fractions must be non-negative and sum to 1, got {fractions}")
    groups = {}
    for s in manifest.samples:
        key = s.group_key if grouped else (s.id,)
        groups.setdefault(key, []).append(s)
    keys = sorted(groups, key=repr)
    order = np.random.default_rng(seed).permutation(len(keys))
    total = len(manifest.samples)
    target = {"val": round(f_val * total), "test": round(f_test * total)}
    filled = {"val": 0, "test": 0}
    smallest = min((len(g) for g in groups.values()), default=0)
    for name, t in target.items():
        if t and smallest > t:
            raise InfeasibleSplitError(
                f"{name} split holds {t} samples but the smallest base-scene group has {smallest}"
            )
    assignment = {}
    for idx in order:
        key = keys[idx]
        size = len(groups[key])
        for name in ("val", "test"):
            if filled[name] + size <= target[name]:
                filled[name] += size
                assignment[key] = name
                break
        else:
            assignment[key] = "train"
    samples = []
    for key, members in groups.items():
        samples.extend(replace(s, split=assignment[key]) for s in members)
    samples.sort(key=lambda s: s.id)
    return manifest.with_samples(samples, split_fractions=(f_train, f_val, f_test))


# ---------------------------------------------------------------- augmentation

BACKGROUND_FILL = tuple(float(v) for v in BACKGROUND_RGB)

PHOTOMETRIC = ("CLAHE", "Blur", "HueSaturationValue")
GEOMETRIC = ("RandomRotate90", "Transpose", "ShiftScaleRotate", "OpticalDistortion", "GridDistortion")
AUGMENTATIONS = PHOTOMETRIC + GEOMETRIC


def _transform(op):
    # Parameter ranges are albumentations defaults unless noted; padding is
    # filled with the background colour and class 0.
    pad = dict(border_mode=cv2.BORDER_CONSTANT, fill=BACKGROUND_FILL, fill_mask=0)
    if op == "CLAHE":
        return A.CLAHE(clip_limit=4.0, tile_grid_size=(8, 8), p=1.0)
    if op == "Blur":
        return A.Blur(blur_limit=(3, 7), p=1.0)
    if op == "HueSaturationValue":
        return A.HueSaturationValue(hue_shift_limit=20, sat_shift_limit=30, val_shift_limit=20, p=1.0)
    if op == "RandomRotate90":
        return A.RandomRotate90(p=1.0)
    if op == "Transpose":
        return A.Transpose(p=1.0)
    if op == "ShiftScaleRotate":
        # shift 0.0625, scale 0.1, rotate 45 (the classic ShiftScaleRotate limits)
        return A.Affine(translate_percent=(-0.0625, 0.0625), scale=(0.9, 1.1), rotate=(-45, 45),
                        interpolation=cv2.INTER_LINEAR, mask_interpolation=cv2.INTER_NEAREST, p=1.0, **pad)
    if op == "OpticalDistortion":
        return A.OpticalDistortion(distort_limit=(-0.05, 0.05), interpolation=cv2.INTER_LINEAR,
                                   mask_interpolation=cv2.INTER_NEAREST, p=1.0, **pad)
    if op == "GridDistortion":
        return A.GridDistortion(num_steps=5, distort_limit=(-0.3, 0.3), interpolation=cv2.INTER_LINEAR,
                                mask_interpolation=cv2.INTER_NEAREST, p=1.0, **pad)
    raise ConfigError(f"unknown augmentation {op!r}; expected one of {list(AUGMENTATIONS)}")


def augment(sample: RenderedSample, ops: Sequence[str], rng_seed: int) -> RenderedSample:
    """Apply every listed op once, in the given order, seeded by ``rng_seed``."""
    transforms = [_transform(op) for op in ops]
    if not transforms:
        return sample
    pipeline = A.Compose(transforms, seed=int(rng_seed) % (2 ** 32), save_applied_params=True)
    out = pipeline(image=np.ascontiguousarray(sample.image), mask=np.ascontiguousarray(sample.mask))
    meta = dict(sample.meta)
    meta["aug_ops"] = list(ops)
    meta["aug_seed"] = int(rng_seed)
    return RenderedSample(out["image"], out["mask"].astype(sample.mask.dtype), meta)


def choose_ops(ops: Sequence[str], rng: np.random.Generator):
    """Random non-empty subset of ``ops`` (each kept with probability 1/2), order preserved."""
    ops = list(ops)
    if not ops:
        return []
    keep = rng.random(len(ops)) < 0.5
    if not keep.any():
        keep[rng.integers(len(ops))] = True
    return [op for op, k in zip(ops, keep) if k]


def augment_dataset(manifest: DatasetManifest, out_root, ops: Sequence[str] = AUGMENTATIONS,
                    factor: int = 5, seed: int = 0) -> DatasetManifest:
    """Write a new dataset with each base sample plus ``factor - 1`` augmented copies.

    Copies are named ``<base>_aug_<n>`` and keep the base scene's metadata so
    grouped splitting keeps them together.
    """
    for op in ops:
        _transform(op)
    if factor < 1:
        raise ConfigError(f"augmentation.factor must be >= 1, got {factor}")
    src_root = Path(manifest.root)
    out_root = Path(out_root)
    if out_root.resolve() == src_root.resolve():
        raise ConfigError("augmented dataset must be written to a new directory")
    for sub in ("images", "masks"):
        (out_root / sub).mkdir(parents=True, exist_ok=True)
    records = []
    for rec in sorted(manifest.samples, key=lambda s: s.id):
        try:
            shutil.copyfile(src_root / rec.image, out_root / rec.image)
            shutil.copyfile(src_root / rec.mask, out_root / rec.mask)
        except OSError as exc:
            raise WriteError(f"cannot copy {rec.id} into {out_root}: {exc}", path=out_root / rec.image) from exc
        records.append(replace(rec, base_id=rec.base_id or rec.id, aug_index=0, aug_ops=()))
        if factor == 1:
            continue
        base = load_sample(src_root, rec)
        for n in range(1, factor):
            vseed = zlib.crc32(f"{seed}:{rec.id}:{n}".encode())
            chosen = choose_ops(ops, np.random.default_rng(vseed))
            out = augment(base, chosen, vseed)
            vid = f"{rec.id}_aug_{n}"
            image_path, mask_path = f"images/{vid}.png", f"masks/{vid}.png"
            try:
                Image.fromarray(out.image).save(out_root / image_path, format="PNG")
                Image.fromarray(out.mask).save(out_root / mask_path, format="PNG")
            except OSError as exc:
                raise WriteError(f"cannot write {vid}: {exc}", path=out_root / image_path) from exc
            records.append(replace(rec, id=vid, image=image_path, mask=mask_path,
                                   base_id=rec.base_id or rec.id, aug_index=n, aug_ops=tuple(chosen)))
    out = manifest.with_samples(records, root=out_root)
    out.write(out_root)
    return out


# -------------------------------------------------------------------- batches


@dataclass
class BatchTensor:
    images: np.ndarray  # (N, H, W, 1) float32 in [0, 1]
    masks_onehot: np.ndarray  # (N, H, W, C) float32 in {0, 1}
    ids: tuple = ()

    @property
    def masks(self):
        return self.masks_onehot.argmax(-1)

    def __len__(self):
        return len(self.images)


def resize_image(image, size):
    h, w = size
    if image.shape[:2] == (h, w):
        return image
    out = cv2.resize(image, (w, h), interpolation=cv2.INTER_LINEAR)
    return out.reshape(h, w, -1) if image.ndim == 3 else out


def resize_mask(mask, size):
    h, w = size
    if mask.shape[:2] == (h, w):
        return mask
    return cv2.resize(mask, (w, h), interpolation=cv2.INTER_NEAREST_EXACT)


def prepare(image_rgb, mask, target_size):
    """Grayscale, resize and return (uint8 image (H, W, 1), mask)."""
    gray = resize_image(to_grayscale(image_rgb), target_size)
    return gray.reshape(*target_size, 1), resize_mask(np.asarray(mask), target_size)


class BatchStream:
    """Re-iterable batches for one split; decoded arrays are cached in memory.

    With ``shuffle_seed`` set, each pass uses a fresh permutation drawn from a
    generator seeded once, so a sequence of epochs is reproducible.
    """

    def __init__(self, manifest: DatasetManifest, split: Optional[str], batch_size: int = 16,
                 target_size=(128, 128), shuffle_seed: Optional[int] = None):
        self.records = manifest.select(split) if split else list(manifest.samples)
        self.records.sort(key=lambda s: s.id)
        if not self.records:
            raise EmptySplitError(f"split {split!r} has no samples")
        self.root = Path(manifest.root)
        self.num_classes = manifest.label_space.num_classes
        self.batch_size = int(batch_size)
        self.target_size = tuple(target_size)
        self._rng = None if shuffle_seed is None else np.random.default_rng(shuffle_seed)
        self._images = None
        self._masks = None

    def _load(self):
        if self._images is None:
            images, masks = [], []
            for rec in self.records:
                s = load_sample(self.root, rec)
                img, m = prepare(s.image, s.mask, self.target_size)
                images.append(img)
                masks.append(m)
            self._images = np.stack(images)
            self._masks = np.stack(masks)
            if self._masks.max() >= self.num_classes:
                raise LabelRangeError(f"mask value {self._masks.max()} >= {self.num_classes} classes")

    def __len__(self):
        return -(-len(self.records) // self.batch_size)

    def __iter__(self) -> Iterator[BatchTensor]:
        self._load()
        n = len(self.records)
        order = np.arange(n) if self._rng is None else self._rng.permutation(n)
        for start in range(0, n, self.batch_size):
            idx = order[start:start + self.batch_size]
            yield BatchTensor(
                images=normalize(self._images[idx]),
                masks_onehot=one_hot(self._masks[idx], self.num_classes),
                ids=tuple(self.records[i].id for i in idx),
            )


def make_batches(manifest: DatasetManifest, split: Optional[str], batch_size: int = 16,
                 target_size=(128, 128), shuffle_seed: Optional[int] = None) -> Iterator[BatchTensor]:
    return iter(BatchStream(manifest, split, batch_size, target_size, shuffle_seed))


def batch_from_arrays(images_rgb, masks, num_classes, target_size):
    """Build one BatchTensor straight from in-memory RGB images and masks."""
    imgs, ms = zip(*(prepare(i, m, target_size) for i, m in zip(images_rgb, masks)))
    return BatchTensor(normalize(np.stack(imgs)), one_hot(np.stack(ms), num_classes))
