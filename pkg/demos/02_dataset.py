# %% [markdown]
# # From scenes to training batches
#
# Render a small dataset, add augmented copies, split by base scene, and
# stream grayscale batches with one-hot masks.

# %%
import tempfile
from pathlib import Path

import numpy as np

from cubeseg.datapipe import BatchStream, augment_dataset, split_dataset
from cubeseg.manifest import LabelSpace
from cubeseg.scenegen import GenConfig, builtin_houses, default_knockout_plans, generate_dataset

root = Path(tempfile.mkdtemp(prefix="cubeseg_demo_"))
houses = builtin_houses()
gen = GenConfig(knockout_plans={h.name: default_knockout_plans(h)[:1] for h in houses}, seed=0)
base = generate_dataset(houses, LabelSpace.semantic4(), gen, root / "base")
print(len(base.samples), "base scenes in", root / "base")

# %% [markdown]
# Each base scene gets `factor - 1` augmented copies built from a random
# subset of the eight transforms.  Copies keep the base scene's key, so the
# grouped split never puts a scene and its copies on both sides.

# %%
full = augment_dataset(base, root / "augmented", factor=3, seed=0)
full = split_dataset(full, (0.8, 0.1, 0.1), seed=0)
print(full.split_counts())
print("example copy:", next(s for s in full.samples if s.aug_index).aug_ops)

groups = {}
for s in full.samples:
    groups.setdefault(s.group_key, set()).add(s.split)
print("groups straddling splits:", sum(len(v) > 1 for v in groups.values()))

# %%
stream = BatchStream(full, "train", batch_size=16, target_size=(128, 128), shuffle_seed=0)
batch = next(iter(stream))
print("images", batch.images.shape, batch.images.dtype, "range", batch.images.min(), batch.images.max())
print("masks ", batch.masks_onehot.shape, "classes present", np.unique(batch.masks))
