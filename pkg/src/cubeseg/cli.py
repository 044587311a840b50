"""Command line: ``cubeseg {generate,train,evaluate,compare,predict}``.

Every command reads the same YAML run config; ``--set key.path=value``
overrides single keys.  Relative paths resolve against ``--workdir``.
``CUBESEG_REPORT_DIR`` overrides ``report.output_dir``.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import config as config_mod
from .datapipe import BatchStream, augment_dataset, normalize, prepare, resize_mask, split_dataset, to_grayscale
from .errors import ConfigError, CubesegError, NotFoundError
from .manifest import LabelSpace, read_manifest
from .metrics import MetricsReport
from .models import REQUIRED_INPUT, ModelConfig, build_model, load_checkpoint
from .reports import ComparisonReport, plot_history, prediction_panel
from .scenegen import GenConfig, RenderConfig, builtin_houses, default_knockout_plans, generate_dataset, load_house_specs
from .trainer import TrainConfig, evaluate, predict, train

log = logging.getLogger("cubeseg")
REPORT_ENV = "CUBESEG_REPORT_DIR"


class Context:
    def __init__(self, cfg: config_mod.RunConfig, workdir: Path):
        self.cfg = cfg
        self.workdir = workdir

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.workdir / p

    @property
    def dataset_root(self):
        return self.path(self.cfg.dataset.root)

    @property
    def report_dir(self):
        return self.path(os.environ.get(REPORT_ENV) or self.cfg.report.output_dir)

    @property
    def label_space(self):
        return LabelSpace.from_mode(self.cfg.dataset.label_space)

    @property
    def run_name(self):
        return f"{self.cfg.model.arch}_{self.cfg.dataset.label_space}"

    @property
    def checkpoint_dir(self):
        return self.path(self.cfg.train.checkpoint_dir) / self.run_name


def model_config(cfg: config_mod.RunConfig) -> ModelConfig:
    m = cfg.model
    num_classes = m.num_classes or LabelSpace.from_mode(cfg.dataset.label_space).num_classes
    size = tuple(m.input_size) if m.input_size else REQUIRED_INPUT[m.arch]
    return ModelConfig(arch=m.arch, input_size=size, num_classes=num_classes, base_width=m.base_width,
                       dropout=tuple(m.dropout), ppm_bins=tuple(m.ppm_bins)).validate()


def train_config(cfg: config_mod.RunConfig, ckpt_dir) -> TrainConfig:
    t = cfg.train
    return TrainConfig(learning_rate=t.lr, batch_size=t.batch_size, epochs=t.epochs, seed=t.seed,
                       checkpoint_dir=str(ckpt_dir)).validate()


def houses_for(ctx: Context):
    spec = ctx.cfg.dataset.houses
    return builtin_houses() if spec == "builtin" else load_house_specs(ctx.path(spec))


def knockout_plans_for(ctx: Context, houses):
    plans = ctx.cfg.dataset.knockout_plans
    if plans == "none":
        plans = {}
    elif plans == "default":
        plans = {h.name: default_knockout_plans(h) for h in houses}
    limit = ctx.cfg.dataset.knockout_limit
    if limit is not None:
        plans = {k: v[:limit] for k, v in plans.items()}
    return plans


def _dataset_is_current(root: Path, dataset_hash: str):
    try:
        manifest = read_manifest(root)
    except NotFoundError:
        return None
    if manifest.config_hash != dataset_hash:
        raise ConfigError(
            f"{root} holds a dataset generated from a different config "
            f"({manifest.config_hash} != {dataset_hash}); pick a new dataset.root"
        )
    missing = [s.id for s in manifest.samples
               if not (root / s.image).exists() or not (root / s.mask).exists()]
    if missing:
        raise ConfigError(f"{root}: manifest lists {len(missing)} missing files (e.g. {missing[0]})")
    return manifest


def cmd_generate(ctx: Context):
    ds = ctx.cfg.dataset
    root = ctx.dataset_root
    current = _dataset_is_current(root, ctx.cfg.dataset_hash)
    if current is not None:
        print(f"dataset at {root} is up to date ({len(current.samples)} samples)")
        _print_counts(current)
        return current
    houses = houses_for(ctx)
    gen = GenConfig(
        angles=tuple(ds.angles), stages=tuple(ds.stages), knockout_plans=knockout_plans_for(ctx, houses),
        render_cfg=RenderConfig(**ds.render.__dict__), seed=ds.seed,
    )
    base = generate_dataset(houses, ctx.label_space, gen, root / "base")
    full = augment_dataset(base, root, ops=ds.augmentation.ops, factor=ds.augmentation.factor,
                           seed=ds.augmentation.seed)
    full = split_dataset(full, tuple(ds.split.fractions), seed=ds.split.seed, grouped=ds.split.grouped)
    full.config_hash = ctx.cfg.dataset_hash
    full.write(root)
    print(f"generated {len(base.samples)} scenes -> {len(full.samples)} samples in {root}")
    _print_counts(full)
    return full


def _print_counts(manifest):
    counts = manifest.split_counts()
    print("  " + "  ".join(f"{k}={v}" for k, v in counts.items())
          + f"  classes={manifest.label_space.num_classes}")


def _load_dataset(ctx: Context):
    root = ctx.dataset_root
    if not (root / "manifest.json").exists():
        raise NotFoundError(f"no dataset at {root}; run `cubeseg generate` first")
    manifest = read_manifest(root)
    if manifest.label_space.mode != ctx.cfg.dataset.label_space:
        raise ConfigError(f"dataset at {root} is {manifest.label_space.mode}, config asks for "
                          f"{ctx.cfg.dataset.label_space}")
    return manifest


def cmd_train(ctx: Context):
    mcfg = model_config(ctx.cfg)
    manifest = _load_dataset(ctx)
    tcfg = train_config(ctx.cfg, ctx.checkpoint_dir)
    train_stream = BatchStream(manifest, "train", tcfg.batch_size, mcfg.input_size, shuffle_seed=tcfg.seed)
    val_stream = BatchStream(manifest, "val", tcfg.batch_size, mcfg.input_size)
    model = build_model(mcfg, seed=tcfg.seed)
    history = train(model, train_stream, val_stream, tcfg, manifest.label_space, ctx.checkpoint_dir)
    history.meta.update(run_config_hash=ctx.cfg.config_hash, dataset_hash=manifest.config_hash)
    out = ctx.report_dir / ctx.run_name
    out.mkdir(parents=True, exist_ok=True)
    (out / "history.json").write_text(history.dumps())
    (ctx.checkpoint_dir / "history.json").write_text(history.dumps())
    plot_history(history, out, title=ctx.run_name)
    print(f"trained {ctx.run_name} for {len(history)} epochs; best val MeanIoU "
          f"{max(history.val_mean_iou):.4f} at epoch {history.best_epoch + 1}")
    return history


def cmd_evaluate(ctx: Context, checkpoint=None, split="test"):
    mcfg = model_config(ctx.cfg)
    ckpt = ctx.path(checkpoint) if checkpoint else ctx.checkpoint_dir / "best.pt"
    if not ckpt.exists():
        raise NotFoundError(f"checkpoint {ckpt} not found")
    model = load_checkpoint(ckpt, mcfg)
    manifest = _load_dataset(ctx)
    stream = BatchStream(manifest, split, ctx.cfg.train.batch_size, mcfg.input_size)
    meta = {"arch": mcfg.arch, "split": split, "checkpoint": ckpt.name, "config_hash": mcfg.config_hash(),
            "run_config_hash": ctx.cfg.config_hash, "dataset_hash": manifest.config_hash}
    rep = evaluate(model, stream, manifest.label_space, ctx.cfg.report.include_background, meta)
    out = ctx.report_dir / ctx.run_name
    out.mkdir(parents=True, exist_ok=True)
    stem = f"metrics_{split}"
    (out / f"{stem}.json").write_text(rep.dumps())
    (out / f"{stem}.txt").write_text(rep.render_table())
    print(f"{ctx.run_name} [{split}] MeanIoU {rep.mean_iou:.4f}  macro-F1 {rep.macro_f1:.4f}")
    return rep


def cmd_compare(ctx: Context, report_paths, with_reference=False):
    if not report_paths:
        raise ConfigError("compare needs at least one report file")
    reports, sources = [], []
    for p in report_paths:
        path = ctx.path(p)
        if not path.exists():
            raise NotFoundError(f"report {path} not found")
        reports.append(MetricsReport.loads(path.read_text()))
        sources.append(str(p))
    table = ComparisonReport.from_reports(reports, sources)
    if with_reference:
        table = table.with_reference()
    out = ctx.report_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "comparison.txt").write_text(table.render_text())
    (out / "comparison.json").write_text(table.dumps())
    table.render_image(out / "comparison.png")
    print(table.render_text(), end="")
    return table


def cmd_predict(ctx: Context, checkpoint, image_path, out_path, mask_path=None):
    ckpt = ctx.path(checkpoint)
    if not ckpt.exists():
        raise NotFoundError(f"checkpoint {ckpt} not found")
    model = load_checkpoint(ckpt)
    try:
        rgb = np.asarray(Image.open(ctx.path(image_path)).convert("RGB"))
        truth = np.asarray(Image.open(ctx.path(mask_path))) if mask_path else None
    except OSError as exc:
        raise NotFoundError(f"cannot read input image: {exc}") from exc
    size = model.cfg.input_size
    gray, _ = prepare(rgb, np.zeros(rgb.shape[:2], np.uint8), size)
    pred = predict(model, normalize(gray))
    pred_full = resize_mask(pred.astype(np.uint8), rgb.shape[:2])
    num_classes = model.cfg.num_classes
    names = LabelSpace.semantic4().class_names if num_classes == 4 else ()
    panel = prediction_panel(to_grayscale(rgb), pred_full, num_classes, truth, names)
    out = ctx.path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    panel.save(out)
    print(f"wrote {out} ({panel.width}x{panel.height})")
    return out


def build_parser():
    parser = argparse.ArgumentParser(prog="cubeseg", description=__doc__.splitlines()[0])
    parser.add_argument("--workdir", default=".", help="root for all relative paths")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", "-c", default=None, help="YAML run config")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        return p

    add("generate", "render, augment and split a dataset")
    add("train", "train the configured model")
    p = add("evaluate", "score a checkpoint on one split")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p = add("compare", "merge metric reports into one table")
    p.add_argument("reports", nargs="+")
    p.add_argument("--with-reference", action="store_true", help="append the fixed reference rows")
    p = add("predict", "write an input/prediction panel")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mask", default=None, help="optional ground-truth mask for a third panel")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        workdir = Path(args.workdir)
        cfg_path = None
        if args.config:
            cfg_path = Path(args.config)
            cfg_path = cfg_path if cfg_path.is_absolute() else workdir / cfg_path
        ctx = Context(config_mod.load_config(cfg_path, args.overrides), workdir)
        if args.command == "generate":
            cmd_generate(ctx)
        elif args.command == "train":
            cmd_train(ctx)
        elif args.command == "evaluate":
            cmd_evaluate(ctx, args.checkpoint, args.split)
        elif args.command == "compare":
            cmd_compare(ctx, args.reports, args.with_reference)
        elif args.command == "predict":
            cmd_predict(ctx, args.checkpoint, args.image, args.out, args.mask)
    except CubesegError as exc:
        print(f"error [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
