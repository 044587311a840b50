# %% [markdown]
# # A short training run
#
# A few epochs of U-Net-light on a small 4-class dataset, then metrics,
# learning curves, a prediction panel and a comparison table.  This takes a
# few minutes on one CPU core; scores stay low at this scale.  The
# acceptance suite runs the 30-epoch version.

# %%
import tempfile
from pathlib import Path

import torch

from cubeseg.datapipe import BatchStream, augment_dataset, normalize, prepare, split_dataset
from cubeseg.manifest import LabelSpace
from cubeseg.models import ModelConfig, build_model, load_checkpoint
from cubeseg.reports import ComparisonReport, plot_history, prediction_panel
from cubeseg.scenegen import GenConfig, builtin_houses, generate_dataset, load_sample
from cubeseg.trainer import TrainConfig, evaluate, predict, train

torch.set_num_threads(1)
root = Path(tempfile.mkdtemp(prefix="cubeseg_train_"))
ls = LabelSpace.semantic4()
base = generate_dataset(builtin_houses(), ls, GenConfig(seed=0), root / "base")
data = split_dataset(augment_dataset(base, root / "aug", factor=2, seed=0), seed=0)
print(data.split_counts())

# %%
train_stream = BatchStream(data, "train", 16, (128, 128), shuffle_seed=0)
val_stream = BatchStream(data, "val", 16, (128, 128))
model = build_model(ModelConfig(arch="unet_light", num_classes=4), seed=0)
history = train(model, train_stream, val_stream, TrainConfig(epochs=3), ls, checkpoint_dir=root / "ckpt")
print("val MeanIoU per epoch:", [round(v, 3) for v in history.val_mean_iou])
plot_history(history, root / "curves")

# %%
best = load_checkpoint(root / "ckpt" / "best.pt")
rep = evaluate(best, BatchStream(data, "test", 16, (128, 128)), ls, meta={"arch": "unet_light",
                                                                           "label_space": ls.mode})
print(rep.render_table())

rec = data.select("test")[0]
sample = load_sample(data.root, rec)
# batch streams resize on the fly; for a single image do it by hand
img, mask = prepare(sample.image, sample.mask, (128, 128))
panel = prediction_panel(img, predict(best, normalize(img)), 4, mask, ls.class_names)
panel.save(root / "panel.png")

print(ComparisonReport.from_reports([rep]).with_reference().render_text())
print("outputs in", root)
