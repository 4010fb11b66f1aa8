"""Feature extraction backbones and the class-aware probability head.

Two backbones honor the same contract (square input, output spatial size =
input / stride):

* ``tiny`` - four stride-2 conv blocks (total stride 16) for desk-scale
  runs on small synthetic images.
* ``resnet50`` - the standard bottleneck ResNet-50 trunk up to its last
  convolutional stage (total stride 32, 2048 channels).  Weights are random
  unless a checkpoint supplies them.

The head is two 1x1 convolutions with a ReLU between, logits clamped to
+/-15, then a sigmoid, yielding one probability grid per class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .imageops import resize_bilinear
from .nn import BatchNorm2d, Conv2d, Module

LOGIT_CLAMP = 15.0


@dataclass
class BackboneConfig:
    arch: str = "tiny"                      # "tiny" or "resnet50"
    image_size: int = 64
    tiny_channels: tuple = (32, 64, 128, 128)
    tiny_kernels: tuple = (3, 3, 3, 3)
    head_hidden: int = 64
    num_classes: int = 2
    dtype: type = np.float32

    @property
    def stride(self) -> int:
        return 2 ** len(self.tiny_channels) if self.arch == "tiny" else 32

    @property
    def feature_channels(self) -> int:
        return self.tiny_channels[-1] if self.arch == "tiny" else 2048

    @property
    def grid_size(self) -> int:
        if self.image_size % self.stride:
            raise ValueError(f"image size {self.image_size} not divisible by "
                             f"stride {self.stride}")
        return self.image_size // self.stride


@dataclass
class FeatureMap:
    """Batched backbone output [n, c, h, w] plus its input stride."""

    values: Tensor
    stride: int

    def __post_init__(self):
        n, c, h, w = self.values.shape
        if h != w:
            raise ValueError(f"feature maps must be square, got {h}x{w}")

    @property
    def grid_size(self) -> int:
        return self.values.shape[-1]

    def image(self, i: int) -> Tensor:
        return self.values[i]


@dataclass
class ClassProbMap:
    """Per-class probability grids [n, C, H, W], entries strictly in (0, 1)."""

    probs: Tensor
    stride: int

    def image(self, i: int) -> Tensor:
        return self.probs[i]


class TinyBlock(Module):
    """One stride-2 stage: conv -> batch norm -> relu (the same
    normalization family the full-scale trunk relies on)."""

    def __init__(self, cin, cout, kernel, rng, dtype):
        super().__init__()
        self.conv = self.register_module("conv", Conv2d(
            cin, cout, kernel=kernel, stride=2, padding=kernel // 2, bias=False,
            rng=rng, dtype=dtype))
        self.bn = self.register_module("bn", BatchNorm2d(cout, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.relu(self.bn(self.conv(x)))


class TinyBackbone(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        cin = 3
        for i, (cout, kernel) in enumerate(zip(cfg.tiny_channels, cfg.tiny_kernels)):
            self.register_module(f"block{i}", TinyBlock(cin, cout, kernel, rng, cfg.dtype))
            cin = cout

    def __call__(self, x: Tensor) -> Tensor:
        for mod in self._modules.values():
            x = mod(x)
        return x


class Bottleneck(Module):
    def __init__(self, cin, width, cout, stride, rng, dtype):
        super().__init__()
        self.conv1 = self.register_module("conv1", Conv2d(
            cin, width, 1, bias=False, rng=rng, dtype=dtype))
        self.bn1 = self.register_module("bn1", BatchNorm2d(width, dtype=dtype))
        self.conv2 = self.register_module("conv2", Conv2d(
            width, width, 3, stride=stride, padding=1, bias=False, rng=rng, dtype=dtype))
        self.bn2 = self.register_module("bn2", BatchNorm2d(width, dtype=dtype))
        self.conv3 = self.register_module("conv3", Conv2d(
            width, cout, 1, bias=False, rng=rng, dtype=dtype))
        self.bn3 = self.register_module("bn3", BatchNorm2d(cout, dtype=dtype))
        self.downsample = None
        if stride != 1 or cin != cout:
            self.downsample = self.register_module("down_conv", Conv2d(
                cin, cout, 1, stride=stride, bias=False, rng=rng, dtype=dtype))
            self.down_bn = self.register_module("down_bn", BatchNorm2d(cout, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        out = ad.relu(self.bn1(self.conv1(x)))
        out = ad.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        skip = x if self.downsample is None else self.down_bn(self.downsample(x))
        return ad.relu(out + skip)


class ResNet50Backbone(Module):
    """ResNet-50 trunk through its final convolutional stage."""

    LAYOUT = ((3, 64, 256, 1), (4, 128, 512, 2), (6, 256, 1024, 2), (3, 512, 2048, 2))

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        dtype = cfg.dtype
        self.conv1 = self.register_module("conv1", Conv2d(
            3, 64, 7, stride=2, padding=3, bias=False, rng=rng, dtype=dtype))
        self.bn1 = self.register_module("bn1", BatchNorm2d(64, dtype=dtype))
        cin = 64
        for stage, (blocks, width, cout, stride) in enumerate(self.LAYOUT, start=2):
            for b in range(blocks):
                self.register_module(
                    f"stage{stage}_block{b}",
                    Bottleneck(cin, width, cout, stride if b == 0 else 1, rng, dtype))
                cin = cout

    def __call__(self, x: Tensor) -> Tensor:
        x = ad.relu(self.bn1(self.conv1(x)))
        x = ad.max_pool2d(x, kernel=3, stride=2, padding=1)
        for name, mod in self._modules.items():
            if name.startswith("stage"):
                x = mod(x)
        return x


class ProbabilityHead(Module):
    # Most cells are negative; starting the output logits below zero keeps
    # early optimization from fighting the class prior.
    PRIOR_LOGIT = -2.0

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        super().__init__()
        self.conv1 = self.register_module("conv1", Conv2d(
            cfg.feature_channels, cfg.head_hidden, 1, rng=rng, dtype=cfg.dtype))
        self.conv2 = self.register_module("conv2", Conv2d(
            cfg.head_hidden, cfg.num_classes, 1, rng=rng, dtype=cfg.dtype))
        self.conv2.b.data[:] = self.PRIOR_LOGIT

    def __call__(self, features: Tensor) -> Tensor:
        logits = self.conv2(ad.relu(self.conv1(features)))
        return ad.sigmoid(ad.clip(logits, -LOGIT_CLAMP, LOGIT_CLAMP))


def build_backbone(cfg: BackboneConfig, rng: np.random.Generator) -> Module:
    if cfg.arch == "tiny":
        return TinyBackbone(cfg, rng)
    if cfg.arch == "resnet50":
        return ResNet50Backbone(cfg, rng)
    raise ValueError(f"unknown backbone {cfg.arch!r}")


def extract_features(images, backbone: Module, cfg: BackboneConfig) -> FeatureMap:
    """Run the backbone over a batch [n, 3, S, S]."""
    if not isinstance(images, Tensor):
        images = ad.tensor(np.asarray(images, dtype=cfg.dtype))
    n, c, h, w = images.shape
    if h != w:
        raise ValueError(f"inputs must be square, got {h}x{w}")
    if h != cfg.image_size:
        raise ValueError(f"input size {h} does not match configured "
                         f"{cfg.image_size}")
    return FeatureMap(values=backbone(images), stride=cfg.stride)


def predict_class_map(features: FeatureMap, head: ProbabilityHead) -> ClassProbMap:
    values = features.values
    if head.conv1.w.shape[1] != values.shape[1]:
        raise ValueError(f"head expects {head.conv1.w.shape[1]} channels, "
                         f"features have {values.shape[1]}")
    return ClassProbMap(probs=head(values), stride=features.stride)


def upsample_features(features: FeatureMap, factor: int) -> FeatureMap:
    """Bilinear spatial upsampling; used at evaluation time only, so the
    result carries no gradient graph."""
    if factor < 1 or int(factor) != factor:
        raise ValueError(f"factor must be a positive integer, got {factor}")
    factor = int(factor)
    if factor == 1:
        return FeatureMap(values=ad.tensor(features.values.data.copy()),
                          stride=features.stride)
    n, c, h, w = features.values.shape
    up = resize_bilinear(features.values.data, h * factor, w * factor)
    if features.stride % factor:
        raise ValueError(f"stride {features.stride} not divisible by factor {factor}")
    return FeatureMap(values=ad.tensor(up.astype(features.values.data.dtype)),
                      stride=features.stride // factor)
