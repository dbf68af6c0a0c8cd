"""3D classification networks: DenseNet and ResNet families.

The reference 2D architectures are lifted to 3D by replacing every planar
convolution and pooling with its volumetric counterpart, keeping layer
counts intact. Inputs are anisotropic (e.g. 36 slices vs 256 in-plane),
and the nets keep their isotropic strides, except that any downsampling
stage that would collapse the slice (Z) axis below one voxel switches
that axis's kernel/stride to 1. The per-stage choice is recorded on the
built model as ``model.downsample_plan``.

Initialization is fixed and seeded: fan-in-scaled normal draws for conv
and linear weights, ones/zeros for norm layers, zero biases.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import OrderedDict
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import InvalidConfigError, ShapeMismatchError

FAMILIES = ("densenet", "resnet")
BN_SIZE = 4           # densenet bottleneck width multiplier
BOTTLENECK_EXPANSION = 4

PRESETS = {
    "densenet121": dict(family="densenet", block_layers=(6, 12, 24, 16),
                        growth_rate=32, init_features=64),
    "resnet50": dict(family="resnet", block_layers=(3, 4, 6, 3), init_features=64),
    "resnet101": dict(family="resnet", block_layers=(3, 4, 23, 3), init_features=64),
    "densenet_micro": dict(family="densenet", block_layers=(2, 2),
                           growth_rate=4, init_features=8),
    "resnet_micro": dict(family="resnet", block_layers=(1, 1), init_features=8),
}


@dataclass
class ModelConfig:
    family: str = "densenet"
    block_layers: tuple[int, ...] = (6, 12, 24, 16)
    growth_rate: int = 32
    init_features: int = 64
    num_classes: int = 5
    in_channels: int = 1
    input_shape: tuple[int, int, int] = (36, 256, 256)  # (Z, Y, X)
    seed: int = 0

    def __post_init__(self):
        self.block_layers = tuple(int(n) for n in self.block_layers)
        self.input_shape = tuple(int(n) for n in self.input_shape)
        if self.family not in FAMILIES:
            raise InvalidConfigError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if not self.block_layers or any(n < 1 for n in self.block_layers):
            raise InvalidConfigError(f"block_layers must be non-empty, entries >= 1, "
                                     f"got {self.block_layers}")
        if self.num_classes < 2:
            raise InvalidConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.growth_rate < 1 or self.init_features < 1 or self.in_channels < 1:
            raise InvalidConfigError("growth_rate, init_features, in_channels must be >= 1")
        if len(self.input_shape) != 3 or any(n < 1 for n in self.input_shape):
            raise InvalidConfigError(f"input_shape must be 3 positive ints, got {self.input_shape}")

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "block_layers": list(self.block_layers),
            "growth_rate": self.growth_rate,
            "init_features": self.init_features,
            "num_classes": self.num_classes,
            "in_channels": self.in_channels,
            "input_shape": list(self.input_shape),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        return cls(**doc)

    def fingerprint(self) -> str:
        """Architecture fingerprint; the seed does not affect loadability."""
        doc = self.to_dict()
        doc.pop("seed")
        canonical = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def model_config(preset: str, **overrides) -> ModelConfig:
    if preset not in PRESETS:
        raise InvalidConfigError(f"unknown preset {preset!r}; known: {sorted(PRESETS)}")
    params = dict(PRESETS[preset])
    params.update(overrides)
    return ModelConfig(**params)


def _conv_out(n: int, kernel: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - kernel) // stride + 1


@dataclass(frozen=True)
class _StageOp:
    name: str
    kernel: tuple[int, int, int]
    stride: tuple[int, int, int]
    padding: tuple[int, int, int]


def _downsample_plan(cfg: ModelConfig) -> list[_StageOp]:
    """Resolve per-stage kernels/strides against the configured input shape."""
    if cfg.family == "densenet":
        stages = [("conv0", 7, 2, 3), ("pool0", 3, 2, 1)]
        stages += [(f"transition{i}", 2, 2, 0) for i in range(1, len(cfg.block_layers))]
    else:
        stages = [("conv1", 7, 2, 3), ("maxpool", 3, 2, 1)]
        stages += [(f"layer{i}", 3, 2, 1) for i in range(2, len(cfg.block_layers) + 1)]

    z, y, x = cfg.input_shape
    plan = []
    for name, kernel, stride, padding in stages:
        out_y = _conv_out(y, kernel, stride, padding)
        out_x = _conv_out(x, kernel, stride, padding)
        if out_y < 1 or out_x < 1:
            raise InvalidConfigError(
                f"input_shape {cfg.input_shape} collapses in-plane at stage '{name}' "
                f"({y}x{x} -> {out_y}x{out_x}); too small for the downsampling depth"
            )
        out_z = _conv_out(z, kernel, stride, padding)
        if out_z < 1:
            # keep the slice axis alive: this stage stops downsampling Z
            plan.append(_StageOp(name, (1, kernel, kernel), (1, stride, stride),
                                 (0, padding, padding)))
            out_z = z
        else:
            plan.append(_StageOp(name, (kernel,) * 3, (stride,) * 3, (padding,) * 3))
        z, y, x = out_z, out_y, out_x
    return plan


class _DenseLayer(nn.Module):
    def __init__(self, in_channels: int, growth_rate: int):
        super().__init__()
        inter = BN_SIZE * growth_rate
        self.norm1 = nn.BatchNorm3d(in_channels)
        self.conv1 = nn.Conv3d(in_channels, inter, kernel_size=1, bias=False)
        self.norm2 = nn.BatchNorm3d(inter)
        self.conv2 = nn.Conv3d(inter, growth_rate, kernel_size=3, padding=1, bias=False)

    def forward(self, x):
        out = self.conv1(F.relu(self.norm1(x)))
        out = self.conv2(F.relu(self.norm2(out)))
        return torch.cat([x, out], dim=1)


class _Transition(nn.Sequential):
    def __init__(self, in_channels: int, out_channels: int, op: _StageOp):
        super().__init__(
            OrderedDict(
                [
                    ("norm", nn.BatchNorm3d(in_channels)),
                    ("relu", nn.ReLU(inplace=True)),
                    ("conv", nn.Conv3d(in_channels, out_channels, kernel_size=1, bias=False)),
                    ("pool", nn.AvgPool3d(kernel_size=op.kernel, stride=op.stride)),
                ]
            )
        )


class DenseNet3D(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self.downsample_plan = _downsample_plan(cfg)
        ops = {op.name: op for op in self.downsample_plan}

        features = OrderedDict()
        features["conv0"] = nn.Conv3d(
            cfg.in_channels, cfg.init_features, kernel_size=ops["conv0"].kernel,
            stride=ops["conv0"].stride, padding=ops["conv0"].padding, bias=False,
        )
        features["norm0"] = nn.BatchNorm3d(cfg.init_features)
        features["relu0"] = nn.ReLU(inplace=True)
        features["pool0"] = nn.MaxPool3d(
            kernel_size=ops["pool0"].kernel, stride=ops["pool0"].stride,
            padding=ops["pool0"].padding,
        )
        channels = cfg.init_features
        for i, n_layers in enumerate(cfg.block_layers, start=1):
            block = nn.Sequential(
                OrderedDict(
                    (f"denselayer{j + 1}", _DenseLayer(channels + j * cfg.growth_rate,
                                                       cfg.growth_rate))
                    for j in range(n_layers)
                )
            )
            features[f"denseblock{i}"] = block
            channels += n_layers * cfg.growth_rate
            if i != len(cfg.block_layers):
                features[f"transition{i}"] = _Transition(
                    channels, channels // 2, ops[f"transition{i}"]
                )
                channels //= 2
        features["norm5"] = nn.BatchNorm3d(channels)
        self.features = nn.Sequential(features)
        self.classifier = nn.Linear(channels, cfg.num_classes)

    def forward(self, x):
        out = F.relu(self.features(x))
        out = F.adaptive_avg_pool3d(out, 1).flatten(1)
        return self.classifier(out)


class _Bottleneck(nn.Module):
    def __init__(self, in_channels: int, planes: int, stride, downsample=None):
        super().__init__()
        out_channels = planes * BOTTLENECK_EXPANSION
        self.conv1 = nn.Conv3d(in_channels, planes, kernel_size=1, bias=False)
        self.bn1 = nn.BatchNorm3d(planes)
        self.conv2 = nn.Conv3d(planes, planes, kernel_size=3, stride=stride,
                               padding=1, bias=False)
        self.bn2 = nn.BatchNorm3d(planes)
        self.conv3 = nn.Conv3d(planes, out_channels, kernel_size=1, bias=False)
        self.bn3 = nn.BatchNorm3d(out_channels)
        self.downsample = downsample

    def forward(self, x):
        identity = self.downsample(x) if self.downsample is not None else x
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return F.relu(out + identity)


class ResNet3D(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self.downsample_plan = _downsample_plan(cfg)
        ops = {op.name: op for op in self.downsample_plan}

        self.conv1 = nn.Conv3d(
            cfg.in_channels, cfg.init_features, kernel_size=ops["conv1"].kernel,
            stride=ops["conv1"].stride, padding=ops["conv1"].padding, bias=False,
        )
        self.bn1 = nn.BatchNorm3d(cfg.init_features)
        self.maxpool = nn.MaxPool3d(
            kernel_size=ops["maxpool"].kernel, stride=ops["maxpool"].stride,
            padding=ops["maxpool"].padding,
        )
        channels = cfg.init_features
        layers = []
        for i, n_blocks in enumerate(cfg.block_layers, start=1):
            planes = cfg.init_features * (2 ** (i - 1))
            stride = (1, 1, 1) if i == 1 else ops[f"layer{i}"].stride
            blocks = []
            for j in range(n_blocks):
                block_stride = stride if j == 0 else (1, 1, 1)
                downsample = None
                if j == 0 and (block_stride != (1, 1, 1)
                               or channels != planes * BOTTLENECK_EXPANSION):
                    downsample = nn.Sequential(
                        nn.Conv3d(channels, planes * BOTTLENECK_EXPANSION, kernel_size=1,
                                  stride=block_stride, bias=False),
                        nn.BatchNorm3d(planes * BOTTLENECK_EXPANSION),
                    )
                blocks.append(_Bottleneck(channels, planes, block_stride, downsample))
                channels = planes * BOTTLENECK_EXPANSION
            layers.append(nn.Sequential(*blocks))
        self.layers = nn.Sequential(*layers)
        self.fc = nn.Linear(channels, cfg.num_classes)

    def forward(self, x):
        out = self.maxpool(F.relu(self.bn1(self.conv1(x))))
        out = self.layers(out)
        out = F.adaptive_avg_pool3d(out, 1).flatten(1)
        return self.fc(out)


def _init_parameters(model: nn.Module, seed: int) -> None:
    gen = torch.Generator()
    gen.manual_seed(int(seed) % (2**63))
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.Conv3d):
                fan_in = module.in_channels * math.prod(module.kernel_size)
                module.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=gen)
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.BatchNorm3d):
                module.weight.fill_(1.0)
                module.bias.zero_()
            elif isinstance(module, nn.Linear):
                module.weight.normal_(0.0, math.sqrt(1.0 / module.in_features), generator=gen)
                module.bias.zero_()


def build_model(cfg: ModelConfig) -> nn.Module:
    """Construct the configured network with seeded deterministic weights."""
    if cfg.family == "densenet":
        model = DenseNet3D(cfg)
    else:
        model = ResNet3D(cfg)
    _init_parameters(model, cfg.seed)
    model.eval()
    return model


def forward(model: nn.Module, batch) -> torch.Tensor:
    """Inference-mode forward pass with strict shape checking."""
    cfg: ModelConfig = model.config
    if isinstance(batch, np.ndarray):
        batch = torch.from_numpy(np.ascontiguousarray(batch, dtype=np.float32))
    if batch.dim() != 5:
        raise ShapeMismatchError(f"batch must be 5D (B, C, Z, Y, X), got {tuple(batch.shape)}")
    expected = (cfg.in_channels, *cfg.input_shape)
    if tuple(batch.shape[1:]) != expected:
        raise ShapeMismatchError(
            f"batch shape {tuple(batch.shape)} does not match configured (B, {expected})"
        )
    if not torch.isfinite(batch).all():
        raise ValueError("batch contains non-finite values")
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            logits = model(batch.to(next(model.parameters()).dtype))
    finally:
        if was_training:
            model.train()
    return logits


def parameter_checksum(model: nn.Module) -> str:
    """Stable digest of all parameters and buffers, for determinism checks."""
    digest = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(tensor.detach().cpu().numpy()).tobytes())
    return digest.hexdigest()
