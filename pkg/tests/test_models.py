import numpy as np
import pytest
import torch
from torch import nn

from cubeseg.errors import CompatibilityError, ConfigError, ShapeError
from cubeseg.models import (ModelConfig, PSPNet, build_model, conv_widths, forward, load_checkpoint,
                            param_count, save_checkpoint)

from oracles import unet_conv_weight_counts, unet_light_param_oracle


def _cfg(arch, size, classes=4, **kw):
    return ModelConfig(arch=arch, input_size=(size, size), num_classes=classes, **kw)


def _images(n, size, seed=0):
    return torch.rand(n, size, size, 1, generator=torch.Generator().manual_seed(seed))


@pytest.mark.parametrize("arch,size", [("unet_light", 128), ("linknet", 128), ("pspnet", 192)])
@pytest.mark.parametrize("classes", [4, 44])
def test_output_shape_and_softmax(arch, size, classes):
    model = build_model(_cfg(arch, size, classes), seed=0).eval()
    with torch.no_grad():
        out = forward(model, _images(2, size))
    assert out.shape == (2, size, size, classes)
    assert torch.allclose(out.sum(-1), torch.ones(2, size, size), atol=1e-5)
    assert (out >= 0).all()


def test_unet_param_count_matches_closed_form():
    model = build_model(_cfg("unet_light", 128), seed=0)
    assert param_count(model) == unet_light_param_oracle() == 1_940_868
    wide = build_model(_cfg("unet_light", 128, base_width=64, strict_input=False), seed=0)
    assert param_count(wide) == unet_light_param_oracle((64, 128, 256, 512), 1024)


def test_unet_light_is_the_wide_net_divided_by_four():
    light = unet_conv_weight_counts((16, 32, 64, 128), 256)
    wide = unet_conv_weight_counts((64, 128, 256, 512), 1024)
    # first layer has a single input channel, so it only shrinks by 4
    assert wide[0] == 4 * light[0]
    assert all(w == 16 * l for w, l in zip(wide[1:], light[1:]))
    model = build_model(_cfg("unet_light", 128), seed=0)
    convs = [m for m in model.net.modules() if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d))]
    assert [m.weight.numel() for m in convs[:-1]] == light
    assert sorted(set(conv_widths(model)))[-1] == 256


def test_linknet_structure():
    model = build_model(_cfg("linknet", 128), seed=0)
    assert model.net.encoder_widths == (64, 128, 256, 512)
    feats = model.net.encode(torch.zeros(1, 1, 128, 128))
    assert [tuple(f.shape[1:]) for f in feats] == [(64, 32, 32), (128, 16, 16), (256, 8, 8), (512, 4, 4)]


def test_pspnet_pyramid():
    model = build_model(_cfg("pspnet", 192), seed=0)
    net = model.net
    assert isinstance(net, PSPNet) and net.ppm.out_channels == 1024
    trunk = net.backbone(torch.zeros(1, 1, 192, 192))
    assert tuple(trunk.shape[1:]) == (512, 6, 6)
    assert tuple(net.ppm(trunk).shape[1:]) == (1024, 6, 6)


def test_pspnet_128_is_rejected_with_ppm_reason():
    with pytest.raises(ConfigError, match="PPM"):
        build_model(_cfg("pspnet", 128))


def test_strict_input_sizes():
    with pytest.raises(ConfigError):
        build_model(_cfg("unet_light", 192))
    model = build_model(_cfg("unet_light", 128), seed=0)
    with pytest.raises(ShapeError):
        model(torch.zeros(1, 64, 64, 1))
    with pytest.raises(ShapeError):
        model(torch.zeros(1, 128, 128, 3))


@pytest.mark.parametrize("arch,size", [("unet_light", 32), ("linknet", 64), ("pspnet", 192)])
def test_every_parameter_receives_gradient(arch, size):
    model = build_model(_cfg(arch, size, strict_input=False), seed=0).train()
    loss = model.log_probs(_images(2, size)).mean()
    loss.backward()
    for name, p in model.named_parameters():
        assert p.grad is not None and torch.isfinite(p.grad).all(), name
        assert p.grad.abs().sum() > 0, name


@pytest.mark.parametrize("arch,size", [("unet_light", 32), ("linknet", 64)])
def test_eval_is_deterministic_and_train_has_dropout(arch, size):
    model = build_model(_cfg(arch, size, strict_input=False), seed=0)
    x = _images(1, size)
    model.eval()
    with torch.no_grad():
        assert torch.equal(model(x), model(x))
        model.train()
        torch.manual_seed(1)
        a = model(x)
        torch.manual_seed(2)
        b = model(x)
    assert not torch.equal(a, b)


def test_pspnet_accepts_batch_of_one_in_train_mode():
    model = build_model(_cfg("pspnet", 192), seed=0).train()
    assert model(_images(1, 192)).shape == (1, 192, 192, 4)


def test_seeded_build_is_reproducible():
    a = build_model(_cfg("linknet", 128), seed=3)
    b = build_model(_cfg("linknet", 128), seed=3)
    for (_, pa), (_, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(pa, pb)


def test_biases_start_at_zero():
    model = build_model(_cfg("unet_light", 128), seed=0)
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)) and m.bias is not None:
            assert (m.bias == 0).all()


def test_checkpoint_compatibility(tmp_path):
    cfg = _cfg("unet_light", 128)
    model = build_model(cfg, seed=0).eval()
    path = tmp_path / "m.pt"
    save_checkpoint(model, path)
    again = load_checkpoint(path, cfg)
    x = _images(1, 128)
    with torch.no_grad():
        assert torch.equal(model(x), again(x))
    with pytest.raises(CompatibilityError):
        load_checkpoint(path, _cfg("unet_light", 128, classes=44))


def test_numpy_input():
    model = build_model(_cfg("unet_light", 128), seed=0).eval()
    with torch.no_grad():
        out = forward(model, np.zeros((1, 128, 128, 1), np.float32))
    assert out.shape == (1, 128, 128, 4)
