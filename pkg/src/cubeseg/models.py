"""Segmentation networks built from scratch: U-Net (light), LinkNet, PSPNet.

All three share one contract.  ``SegmentationModel`` takes channels-last
batches ``(N, H, W, 1)`` with values in [0, 1] and returns per-pixel class
probabilities ``(N, H, W, C)``.  Internally the networks run channels-first
and produce logits.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CompatibilityError, ConfigError, ShapeError

ARCHS = ("unet_light", "linknet", "pspnet")
REQUIRED_INPUT = {"unet_light": (128, 128), "linknet": (128, 128), "pspnet": (192, 192)}
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    arch: str = "unet_light"
    input_size: tuple = (128, 128)
    in_channels: int = 1
    num_classes: int = 4
    base_width: int = 16
    dropout: tuple = (0.1, 0.3, 0.2)
    backbone: str = "resnet18"
    ppm_bins: tuple = (1, 2, 3, 6)
    # Relaxes the fixed per-architecture input size (tests, gradient checks).
    strict_input: bool = True

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.dropout = tuple(float(v) for v in self.dropout)
        self.ppm_bins = tuple(int(v) for v in self.ppm_bins)

    def validate(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"model.arch: unknown architecture {self.arch!r}")
        if self.in_channels < 1 or self.num_classes < 2:
            raise ConfigError("model: need in_channels >= 1 and num_classes >= 2")
        if len(self.dropout) != 3:
            raise ConfigError("model.dropout: expected (encoder, bottleneck, decoder)")
        h, w = self.input_size
        if self.arch == "pspnet":
            if self.backbone != "resnet18":
                raise ConfigError(f"model.backbone: only resnet18 is supported, got {self.backbone!r}")
            if h % 32 or w % 32:
                raise ConfigError(f"model.input_size: pspnet needs sizes divisible by 32, got {self.input_size}")
            grid = (h // 32, w // 32)
            bad = [b for b in self.ppm_bins if grid[0] % b or grid[1] % b]
            if bad:
                raise ConfigError(
                    f"model.input_size: pspnet backbone grid {grid} is not divisible by "
                    f"PPM bins {bad} (input must give a grid divisible by {list(self.ppm_bins)})"
                )
        if self.strict_input and self.input_size != REQUIRED_INPUT[self.arch]:
            raise ConfigError(
                f"model.input_size: {self.arch} requires {REQUIRED_INPUT[self.arch]}, got {self.input_size}"
            )
        return self

    def to_dict(self):
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["dropout"] = list(self.dropout)
        d["ppm_bins"] = list(self.ppm_bins)
        return d

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _init_weights(module):
    # He-uniform for ReLU nets, zero biases.
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
        nn.init.kaiming_uniform_(module.weight, nonlinearity="relu")
        if module.bias is not None:
            nn.init.zeros_(module.bias)


# ---------------------------------------------------------------- U-Net light


def _double_conv(c_in, c_out):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(c_out, c_out, 3, padding=1),
        nn.ReLU(inplace=True),
    )


class UNetUp(nn.Module):
    def __init__(self, c_in, c_out, dropout):
        super().__init__()
        self.up = nn.ConvTranspose2d(c_in, c_out, 2, stride=2)
        self.conv = _double_conv(2 * c_out, c_out)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, skip):
        x = self.up(x)
        x = torch.cat([x, skip], dim=1)
        return self.drop(self.conv(x))


class UNetLight(nn.Module):
    """Four-level U-Net whose widths are the canonical ones divided by 4."""

    def __init__(self, in_channels=1, num_classes=4, base_width=16, dropout=(0.1, 0.3, 0.2)):
        super().__init__()
        p_enc, p_mid, p_dec = dropout
        widths = [base_width * 2 ** i for i in range(4)]
        self.widths = tuple(widths)
        self.bottleneck_width = base_width * 16

        self.down = nn.ModuleList()
        c = in_channels
        for w in widths:
            self.down.append(_double_conv(c, w))
            c = w
        self.pool = nn.MaxPool2d(2)
        self.enc_drop = nn.Dropout(p_enc)
        self.bottleneck = nn.Sequential(_double_conv(c, self.bottleneck_width), nn.Dropout(p_mid))
        c = self.bottleneck_width
        self.up = nn.ModuleList()
        for w in reversed(widths):
            self.up.append(UNetUp(c, w, p_dec))
            c = w
        self.head = nn.Conv2d(c, num_classes, 1)

    def features(self, x):
        """Everything up to (not including) the 1x1 head."""
        h, w = x.shape[-2:]
        if h % 16 or w % 16:
            raise ShapeError(f"unet_light needs input divisible by 16, got {h}x{w}")
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = self.enc_drop(self.pool(x))
        x = self.bottleneck(x)
        for block, skip in zip(self.up, reversed(skips)):
            x = block(x, skip)
        return x

    def forward(self, x):
        return self.head(self.features(x))


# ------------------------------------------------------------ residual pieces


def _conv_bn(c_in, c_out, k, stride=1, padding=0):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, k, stride=stride, padding=padding, bias=False),
        nn.BatchNorm2d(c_out),
    )


class BasicBlock(nn.Module):
    """ResNet basic block; a projection shortcut is used whenever shape changes."""

    def __init__(self, c_in, c_out, stride=1):
        super().__init__()
        self.conv1 = _conv_bn(c_in, c_out, 3, stride, 1)
        self.conv2 = _conv_bn(c_out, c_out, 3, 1, 1)
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            self.shortcut = _conv_bn(c_in, c_out, 1, stride)

    def forward(self, x):
        identity = x if self.shortcut is None else self.shortcut(x)
        out = F.relu(self.conv1(x), inplace=True)
        out = self.conv2(out)
        return F.relu(out + identity, inplace=True)


def _stage(c_in, c_out, stride):
    return nn.Sequential(BasicBlock(c_in, c_out, stride), BasicBlock(c_out, c_out, 1))


class ResNet18Features(nn.Module):
    """ResNet18 trunk (stem + four stages), randomly initialised; stride 32."""

    widths = (64, 128, 256, 512)

    def __init__(self, in_channels=1):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, 64, 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(64),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        self.layer1 = _stage(64, 64, 1)
        self.layer2 = _stage(64, 128, 2)
        self.layer3 = _stage(128, 256, 2)
        self.layer4 = _stage(256, 512, 2)

    def forward(self, x):
        x = self.stem(x)
        return self.layer4(self.layer3(self.layer2(self.layer1(x))))


# -------------------------------------------------------------------- LinkNet


class LinkDecoder(nn.Module):
    def __init__(self, c_in, c_out, stride=2):
        super().__init__()
        mid = c_in // 4
        self.reduce = nn.Sequential(_conv_bn(c_in, mid, 1), nn.ReLU(inplace=True))
        self.up = nn.Sequential(
            nn.ConvTranspose2d(mid, mid, 3, stride=stride, padding=1,
                               output_padding=stride - 1, bias=False),
            nn.BatchNorm2d(mid),
            nn.ReLU(inplace=True),
        )
        self.expand = nn.Sequential(_conv_bn(mid, c_out, 1), nn.ReLU(inplace=True))

    def forward(self, x):
        return self.expand(self.up(self.reduce(x)))


class LinkNet(nn.Module):
    """LinkNet with a ResNet18-style encoder and additive skips.

    Encoder stage 1 keeps resolution, so the matching decoder block does not
    upsample; the two final transposed convolutions undo the max-pool and
    the stride-2 stem.
    """

    def __init__(self, in_channels=1, num_classes=4, dropout=(0.1, 0.3, 0.2)):
        super().__init__()
        p_enc, p_mid, p_dec = dropout
        self.initial = nn.Sequential(
            nn.Conv2d(in_channels, 64, 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(64),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        self.encoders = nn.ModuleList([
            _stage(64, 64, 1),
            _stage(64, 128, 2),
            _stage(128, 256, 2),
            _stage(256, 512, 2),
        ])
        self.enc_drops = nn.ModuleList([nn.Dropout(p) for p in (p_enc, p_enc, p_enc, p_mid)])
        self.decoders = nn.ModuleList([
            LinkDecoder(512, 256),
            LinkDecoder(256, 128),
            LinkDecoder(128, 64),
            LinkDecoder(64, 64, stride=1),
        ])
        self.dec_drop = nn.Dropout(p_dec)
        self.final_up = nn.Sequential(
            nn.ConvTranspose2d(64, 32, 3, stride=2, padding=1, output_padding=1, bias=False),
            nn.BatchNorm2d(32),
            nn.ReLU(inplace=True),
        )
        self.head = nn.ConvTranspose2d(32, num_classes, 2, stride=2)

    @property
    def encoder_widths(self):
        return tuple(stage[-1].conv2[0].out_channels for stage in self.encoders)

    def encode(self, x):
        x = self.initial(x)
        feats = []
        for stage, drop in zip(self.encoders, self.enc_drops):
            x = drop(stage(x))
            feats.append(x)
        return feats

    def features(self, x):
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ShapeError(f"linknet needs input divisible by 32, got {h}x{w}")
        e1, e2, e3, e4 = self.encode(x)
        d = self.dec_drop(self.decoders[0](e4)) + e3
        d = self.dec_drop(self.decoders[1](d)) + e2
        d = self.dec_drop(self.decoders[2](d)) + e1
        d = self.dec_drop(self.decoders[3](d))
        return self.final_up(d)

    def forward(self, x):
        return self.head(self.features(x))


# --------------------------------------------------------------------- PSPNet


class PyramidPooling(nn.Module):
    def __init__(self, c_in, bins=(1, 2, 3, 6)):
        super().__init__()
        c_branch = c_in // len(bins)
        self.bins = tuple(bins)
        self.branches = nn.ModuleList(
            nn.Sequential(nn.AdaptiveAvgPool2d(b), nn.Conv2d(c_in, c_branch, 1), nn.ReLU(inplace=True))
            for b in bins
        )
        self.out_channels = c_in + c_branch * len(bins)

    def forward(self, x):
        size = x.shape[-2:]
        outs = [x]
        for branch in self.branches:
            outs.append(F.interpolate(branch(x), size=size, mode="bilinear", align_corners=False))
        return torch.cat(outs, dim=1)


class PSPHead(nn.Module):
    def __init__(self, c_in, num_classes):
        super().__init__()
        self.conv = nn.Conv2d(c_in, num_classes, 3, padding=1)

    def forward(self, x, out_size):
        return F.interpolate(self.conv(x), size=out_size, mode="bilinear", align_corners=False)


class PSPNet(nn.Module):
    def __init__(self, in_channels=1, num_classes=4, bins=(1, 2, 3, 6)):
        super().__init__()
        self.backbone = ResNet18Features(in_channels)
        self.ppm = PyramidPooling(512, bins)
        self.head = PSPHead(self.ppm.out_channels, num_classes)

    def features(self, x):
        h, w = x.shape[-2:]
        grid = (h // 32, w // 32)
        if h % 32 or w % 32 or any(grid[0] % b or grid[1] % b for b in self.ppm.bins):
            raise ShapeError(
                f"pspnet backbone grid for {h}x{w} input is not divisible by PPM bins {self.ppm.bins}"
            )
        return self.ppm(self.backbone(x))

    def forward(self, x):
        return self.head(self.features(x), x.shape[-2:])


# ----------------------------------------------------------- shared contract


class SegmentationModel(nn.Module):
    """Channels-last wrapper with a softmax head around one of the networks."""

    def __init__(self, cfg: ModelConfig, net: nn.Module):
        super().__init__()
        self.cfg = cfg
        self.net = net

    def _check(self, images):
        if images.ndim != 4 or images.shape[-1] != self.cfg.in_channels:
            raise ShapeError(f"expected (N, H, W, {self.cfg.in_channels}) input, got {tuple(images.shape)}")
        if self.cfg.strict_input and tuple(images.shape[1:3]) != self.cfg.input_size:
            raise ShapeError(f"{self.cfg.arch} expects {self.cfg.input_size} input, got {tuple(images.shape[1:3])}")

    def logits(self, images):
        """(N, H, W, C_in) -> (N, C, H, W) raw scores."""
        self._check(images)
        return self.net(images.permute(0, 3, 1, 2))

    def log_probs(self, images):
        return F.log_softmax(self.logits(images), dim=1).permute(0, 2, 3, 1)

    def forward(self, images):
        return torch.softmax(self.logits(images), dim=1).permute(0, 2, 3, 1)

    def head_parts(self, images):
        """Split the network at its output layer: (frozen features, head fn, head params).

        ``head_fn(features)`` returns logits; it is used for finite-difference
        checks that perturb only the final layer.
        """
        self._check(images)
        x = images.permute(0, 3, 1, 2)
        feats = self.net.features(x)
        if isinstance(self.net, PSPNet):
            size = x.shape[-2:]
            return feats, (lambda f: self.net.head(f, size)), list(self.net.head.parameters())
        return feats, self.net.head, list(self.net.head.parameters())


def build_unet_light(cfg: ModelConfig) -> SegmentationModel:
    if cfg.arch != "unet_light":
        raise ConfigError(f"build_unet_light called with arch={cfg.arch!r}")
    cfg.validate()
    if cfg.input_size[0] % 16 or cfg.input_size[1] % 16:
        raise ShapeError(f"unet_light input must be divisible by 16, got {cfg.input_size}")
    net = UNetLight(cfg.in_channels, cfg.num_classes, cfg.base_width, cfg.dropout)
    net.apply(_init_weights)
    return SegmentationModel(cfg, net)


def build_linknet(cfg: ModelConfig) -> SegmentationModel:
    if cfg.arch != "linknet":
        raise ConfigError(f"build_linknet called with arch={cfg.arch!r}")
    cfg.validate()
    if cfg.input_size[0] % 32 or cfg.input_size[1] % 32:
        raise ShapeError(f"linknet input must be divisible by 32, got {cfg.input_size}")
    net = LinkNet(cfg.in_channels, cfg.num_classes, cfg.dropout)
    net.apply(_init_weights)
    return SegmentationModel(cfg, net)


def build_pspnet(cfg: ModelConfig) -> SegmentationModel:
    if cfg.arch != "pspnet":
        raise ConfigError(f"build_pspnet called with arch={cfg.arch!r}")
    cfg.validate()
    net = PSPNet(cfg.in_channels, cfg.num_classes, cfg.ppm_bins)
    net.apply(_init_weights)
    return SegmentationModel(cfg, net)


BUILDERS = {"unet_light": build_unet_light, "linknet": build_linknet, "pspnet": build_pspnet}


def build_model(cfg: ModelConfig, seed: Optional[int] = None) -> SegmentationModel:
    if cfg.arch not in BUILDERS:
        raise ConfigError(f"model.arch: unknown architecture {cfg.arch!r}")
    if seed is not None:
        torch.manual_seed(seed)
    return BUILDERS[cfg.arch](cfg)


def forward(model: SegmentationModel, images) -> torch.Tensor:
    """Probability map for a batch; accepts numpy or torch input."""
    if not torch.is_tensor(images):
        images = torch.as_tensor(images, dtype=torch.float32)
    return model(images)


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def save_checkpoint(model: SegmentationModel, path, extra: Optional[dict] = None):
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "arch": model.cfg.arch,
        "config": model.cfg.to_dict(),
        "config_hash": model.cfg.config_hash(),
        "state_dict": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }
    torch.save(payload, path)


def read_checkpoint(path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise CompatibilityError(f"{path}: unsupported checkpoint format {payload.get('format_version')!r}")
    return payload


def load_checkpoint(path, cfg: Optional[ModelConfig] = None) -> SegmentationModel:
    """Rebuild a model from a checkpoint.

    When ``cfg`` is given the checkpoint must have been written from an
    identical configuration.
    """
    payload = read_checkpoint(path)
    stored = ModelConfig(**payload["config"])
    if cfg is not None and cfg.config_hash() != payload["config_hash"]:
        raise CompatibilityError(
            f"{path}: checkpoint config hash {payload['config_hash']} does not match {cfg.config_hash()}"
        )
    model = build_model(stored)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model


def conv_widths(model: SegmentationModel) -> Sequence[int]:
    return [m.out_channels for m in model.modules() if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d))]
