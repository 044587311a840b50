# %% [markdown]
# # The three networks
#
# All models take channels-last grayscale batches `(N, H, W, 1)` and return
# per-pixel class probabilities `(N, H, W, C)`.

# %%
import torch

from cubeseg.models import ModelConfig, build_model, param_count

for arch, size in [("unet_light", 128), ("linknet", 128), ("pspnet", 192)]:
    model = build_model(ModelConfig(arch=arch, input_size=(size, size), num_classes=4), seed=0).eval()
    with torch.no_grad():
        probs = model(torch.rand(2, size, size, 1))
    print(f"{arch:10s} {param_count(model):>11,d} params  out {tuple(probs.shape)}  "
          f"sum-to-one err {float((probs.sum(-1) - 1).abs().max()):.1e}")

# %% [markdown]
# PSPNet pools its 1/32-resolution feature map into 1, 2, 3 and 6 bins, so
# the input side must give a grid divisible by all four.  192 gives 6x6;
# 128 would give 4x4 and is refused.

# %%
try:
    build_model(ModelConfig(arch="pspnet", input_size=(128, 128)))
except Exception as exc:
    print(type(exc).__name__, "-", exc)
