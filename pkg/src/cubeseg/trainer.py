"""Training, evaluation and prediction for the segmentation models."""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .datapipe import BatchTensor
from .errors import ConfigError, DivergenceError, EmptySplitError, ShapeError
from .manifest import LabelSpace
from .metrics import ConfusionMatrix, MetricsReport, confusion, mean_iou, report
from .models import ModelConfig, SegmentationModel, build_model, save_checkpoint

log = logging.getLogger(__name__)

EPS = 1e-7
HISTORY_VERSION = 1


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 0.001
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-7
    loss: str = "categorical_crossentropy"
    batch_size: int = 16
    epochs: int = 100
    seed: int = 0
    checkpoint_dir: Optional[str] = None

    def validate(self):
        if self.optimizer != "adam":
            raise ConfigError(f"train.optimizer: only adam is supported, got {self.optimizer!r}")
        if self.loss != "categorical_crossentropy":
            raise ConfigError(f"train.loss: only categorical_crossentropy is supported, got {self.loss!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError("train: epochs >= 0, batch_size >= 1 and learning_rate > 0 required")
        return self


@dataclass
class TrainHistory:
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    train_mean_iou: List[float] = field(default_factory=list)
    val_mean_iou: List[float] = field(default_factory=list)
    wall_clock: List[float] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.train_loss)

    @property
    def best_epoch(self):
        if not self.val_mean_iou:
            return None
        return int(np.argmax(self.val_mean_iou))

    def to_dict(self, with_timing=True):
        d = asdict(self)
        if not with_timing:
            d.pop("wall_clock")
        d["format_version"] = HISTORY_VERSION
        d["epochs"] = len(self)
        return d

    def dumps(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def loads(cls, text):
        d = json.loads(text)
        d.pop("format_version", None)
        d.pop("epochs", None)
        return cls(**d)


def categorical_crossentropy(log_probs: torch.Tensor, target_onehot: torch.Tensor, eps: float = EPS):
    """Mean per-pixel cross-entropy with probabilities clamped to [eps, 1].

    ``log_probs`` and ``target_onehot`` are channels-last ``(N, H, W, C)``.
    """
    clamped = torch.clamp(log_probs, min=math.log(eps), max=0.0)
    return -(target_onehot * clamped).sum(dim=-1).mean()


def _tensors(batch: BatchTensor, dtype=torch.float32):
    return torch.as_tensor(batch.images, dtype=dtype), torch.as_tensor(batch.masks_onehot, dtype=dtype)


def _check_batch(model: SegmentationModel, batch: BatchTensor):
    c = batch.masks_onehot.shape[-1]
    if c != model.cfg.num_classes:
        raise ConfigError(f"data has {c} classes but the model predicts {model.cfg.num_classes}")


def make_optimizer(model, cfg: TrainConfig):
    return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=tuple(cfg.betas), eps=cfg.adam_eps)


def _evaluate_pass(model, data, num_classes):
    """Loss and confusion over a stream in eval mode."""
    model.eval()
    cm = ConfusionMatrix.zeros(num_classes)
    loss_sum, pixels = 0.0, 0
    with torch.no_grad():
        for batch in data:
            _check_batch(model, batch)
            x, y = _tensors(batch)
            lp = model.log_probs(x)
            n = y.shape[0] * y.shape[1] * y.shape[2]
            loss_sum += float(categorical_crossentropy(lp, y)) * n
            pixels += n
            cm += confusion(_argmax(lp), batch.masks_onehot.argmax(-1), num_classes)
    if pixels == 0:
        raise EmptySplitError("evaluation stream yielded no batches")
    return loss_sum / pixels, cm


def _argmax(scores: torch.Tensor) -> np.ndarray:
    # torch.argmax returns the first maximal index, i.e. ties go to the lowest class
    return scores.argmax(dim=-1).cpu().numpy()


def train(model: SegmentationModel, train_data: Iterable[BatchTensor], val_data: Optional[Iterable[BatchTensor]],
          cfg: TrainConfig, label_space: Optional[LabelSpace] = None, checkpoint_dir=None,
          on_epoch=None) -> TrainHistory:
    """Mini-batch Adam on clamped cross-entropy for ``cfg.epochs`` epochs.

    ``train_data`` and ``val_data`` must be re-iterable (e.g. BatchStream).
    After every epoch the model is scored on ``val_data`` with dropout off;
    ``best.pt`` (highest val MeanIoU) and ``last.pt`` are written to
    ``checkpoint_dir`` when given.
    """
    cfg.validate()
    num_classes = model.cfg.num_classes
    if label_space is not None and label_space.num_classes != num_classes:
        raise ConfigError(f"label space has {label_space.num_classes} classes, model has {num_classes}")
    torch.manual_seed(cfg.seed)
    checkpoint_dir = Path(checkpoint_dir or cfg.checkpoint_dir) if (checkpoint_dir or cfg.checkpoint_dir) else None
    if checkpoint_dir:
        checkpoint_dir.mkdir(parents=True, exist_ok=True)
    opt = make_optimizer(model, cfg)
    history = TrainHistory(meta={"config_hash": model.cfg.config_hash(), "arch": model.cfg.arch})
    best = -math.inf
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        model.train()
        cm = ConfusionMatrix.zeros(num_classes)
        loss_sum, pixels = 0.0, 0
        for batch in train_data:
            _check_batch(model, batch)
            x, y = _tensors(batch)
            lp = model.log_probs(x)
            loss = categorical_crossentropy(lp, y)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite training loss at epoch {epoch + 1}", epoch=epoch + 1)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            n = y.shape[0] * y.shape[1] * y.shape[2]
            loss_sum += loss.item() * n
            pixels += n
            cm += confusion(_argmax(lp.detach()), batch.masks_onehot.argmax(-1), num_classes)
        if pixels == 0:
            raise EmptySplitError("training stream yielded no batches")
        history.train_loss.append(loss_sum / pixels)
        history.train_mean_iou.append(mean_iou(cm))
        if val_data is not None:
            vloss, vcm = _evaluate_pass(model, val_data, num_classes)
            if not math.isfinite(vloss):
                raise DivergenceError(f"non-finite validation loss at epoch {epoch + 1}", epoch=epoch + 1)
            history.val_loss.append(vloss)
            history.val_mean_iou.append(mean_iou(vcm))
        history.wall_clock.append(time.perf_counter() - start)
        score = history.val_mean_iou[-1] if history.val_mean_iou else -history.train_loss[-1]
        if checkpoint_dir:
            info = {"epoch": epoch + 1, "val_mean_iou": history.val_mean_iou[-1] if history.val_mean_iou else None}
            if score > best:
                save_checkpoint(model, checkpoint_dir / "best.pt", extra=info)
            save_checkpoint(model, checkpoint_dir / "last.pt", extra=info)
        best = max(best, score)
        log.info("epoch %d/%d loss %.4f val_loss %s val_miou %s (%.1fs)", epoch + 1, cfg.epochs,
                 history.train_loss[-1], history.val_loss[-1] if history.val_loss else "-",
                 history.val_mean_iou[-1] if history.val_mean_iou else "-", history.wall_clock[-1])
        if on_epoch is not None:
            on_epoch(epoch, history)
    if checkpoint_dir:
        (checkpoint_dir / "history.json").write_text(history.dumps())
    return history


def evaluate(model: SegmentationModel, data: Iterable[BatchTensor], label_space: LabelSpace,
             include_background: bool = True, meta: Optional[dict] = None) -> MetricsReport:
    """Global-confusion-matrix metrics over every batch of ``data``."""
    if label_space.num_classes != model.cfg.num_classes:
        raise ConfigError(f"label space has {label_space.num_classes} classes, model has {model.cfg.num_classes}")
    _, cm = _evaluate_pass(model, data, label_space.num_classes)
    meta = dict(meta or {})
    meta.setdefault("config_hash", model.cfg.config_hash())
    meta.setdefault("label_space", label_space.mode)
    return report(cm, label_space.class_names, include_background, meta)


def predict(model: SegmentationModel, image) -> np.ndarray:
    """(H, W, 1) float image in [0, 1] -> (H, W) class mask; ties go to the lower index."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        image = image[..., None]
    if image.ndim != 3:
        raise ShapeError(f"expected an (H, W, 1) image, got {image.shape}")
    model.eval()
    with torch.no_grad():
        probs = model(torch.as_tensor(image[None]))
    return _argmax(probs)[0]


def sanity_overfit(model_cfg: ModelConfig, batch: BatchTensor, steps: int, lr: float = 0.001,
                   seed: int = 0, model: Optional[SegmentationModel] = None):
    """Train on one small batch only; returns the per-step training losses.

    Used to confirm the optimisation plumbing can memorise a batch.
    """
    if len(batch) > 4:
        raise ConfigError(f"sanity_overfit takes at most 4 samples, got {len(batch)}")
    if model is None:
        model = build_model(model_cfg, seed=seed)
    _check_batch(model, batch)
    if steps <= 0:
        return [], model
    torch.manual_seed(seed)
    opt = make_optimizer(model, TrainConfig(learning_rate=lr))
    x, y = _tensors(batch)
    trace = []
    model.train()
    for step in range(steps):
        loss = categorical_crossentropy(model.log_probs(x), y)
        if not torch.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {step + 1}", epoch=0)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        trace.append(loss.item())
    return trace, model


def batch_loss(model: SegmentationModel, batch: BatchTensor) -> float:
    model.eval()
    x, y = _tensors(batch)
    with torch.no_grad():
        return float(categorical_crossentropy(model.log_probs(x), y))


def head_gradient_check(model: SegmentationModel, batch: BatchTensor, crop=(0, 0, 4), step: float = 1e-6,
                        subset: Optional[int] = None, seed: int = 0):
    """Analytic vs central-difference gradients of the output layer.

    The loss is the clamped cross-entropy restricted to a ``crop = (y, x, size)``
    window of the output.  Runs in float64 with the rest of the network frozen
    in eval mode.  ``subset`` limits the check to that many head entries drawn
    with ``seed`` (large heads are slow to difference).  Returns
    ``(analytic, numeric)`` flat arrays over the checked entries.
    """
    model = copy.deepcopy(model).double().eval()
    y0, x0, size = crop
    x, target = _tensors(batch, torch.float64)
    target = target[:, y0:y0 + size, x0:x0 + size, :]
    with torch.no_grad():
        feats, head, params = model.head_parts(x)

    def loss_fn():
        logits = head(feats)[:, :, y0:y0 + size, x0:x0 + size]
        lp = F.log_softmax(logits, dim=1).permute(0, 2, 3, 1)
        return categorical_crossentropy(lp, target)

    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = torch.cat([p.grad.reshape(-1) for p in params]).numpy().copy()
    entries = [(p, i) for p in params for i in range(p.numel())]
    if subset is not None and subset < len(entries):
        pick = np.sort(np.random.default_rng(seed).choice(len(entries), subset, replace=False))
        entries = [entries[k] for k in pick]
        analytic = analytic[pick]
    numeric = []
    with torch.no_grad():
        for p, i in entries:
            flat = p.view(-1)
            orig = flat[i].item()
            flat[i] = orig + step
            up = loss_fn().item()
            flat[i] = orig - step
            down = loss_fn().item()
            flat[i] = orig
            numeric.append((up - down) / (2 * step))
    return analytic, np.asarray(numeric)
