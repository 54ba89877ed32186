"""Backbones behind a common multi-label interface.

Every model is a :class:`MultiLabelNet`: a ``backbone`` producing a feature
vector and a linear ``head`` whose width equals the registry size. Parameter
names are therefore ``backbone.*`` and ``head.*`` for every architecture.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import nn

from cxrlt.errors import ConfigError

TORCHVISION_ARCHS = ("densenet161", "resnext101_32x8d")


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    num_labels: int
    image_size: int = 448
    width: int = 16  # toy_cnn only

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data) -> "ModelSpec":
        return cls(**data)


class MultiLabelNet(nn.Module):
    def __init__(self, backbone: nn.Module, feature_dim: int, num_labels: int):
        super().__init__()
        self.backbone = backbone
        self.head = nn.Linear(feature_dim, num_labels)
        self.num_labels = num_labels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.backbone(x))


class ToyCNN(nn.Module):
    """Three conv blocks and global max pooling; small enough for CPU tests."""

    def __init__(self, width: int = 16):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(width, 2 * width, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(2 * width, 4 * width, 3, padding=1),
            nn.ReLU(),
            nn.AdaptiveMaxPool2d(1),
            nn.Flatten(),
        )
        self.out_dim = 4 * width

    def forward(self, x):
        return self.features(x)


def _torchvision_backbone(arch: str) -> tuple[nn.Module, int]:
    import torchvision

    if arch == "densenet161":
        net = torchvision.models.densenet161(weights=None)
        dim = net.classifier.in_features
        net.classifier = nn.Identity()
    elif arch == "resnext101_32x8d":
        net = torchvision.models.resnext101_32x8d(weights=None)
        dim = net.fc.in_features
        net.fc = nn.Identity()
    else:
        raise ConfigError(f"unknown torchvision architecture {arch!r}")
    return net, dim


def torchvision_imagenet_state(arch: str) -> dict[str, torch.Tensor]:
    """ImageNet weights of a torchvision backbone (downloads on first use)."""
    import torchvision

    if arch == "densenet161":
        net = torchvision.models.densenet161(weights="IMAGENET1K_V1")
    elif arch == "resnext101_32x8d":
        net = torchvision.models.resnext101_32x8d(weights="IMAGENET1K_V2")
    else:
        raise ConfigError(f"no ImageNet weights for {arch!r}")
    return net.state_dict()


def build_model(spec: ModelSpec) -> MultiLabelNet:
    if spec.num_labels <= 0:
        raise ConfigError("num_labels must be positive")
    if spec.arch == "toy_cnn":
        backbone = ToyCNN(spec.width)
        dim = backbone.out_dim
    elif spec.arch == "linear":
        backbone = nn.Flatten()
        dim = 3 * spec.image_size * spec.image_size
    elif spec.arch in TORCHVISION_ARCHS:
        backbone, dim = _torchvision_backbone(spec.arch)
    else:
        raise ConfigError(f"unknown architecture {spec.arch!r}")
    return MultiLabelNet(backbone, dim, spec.num_labels)


@torch.no_grad()
def reset_head(model: MultiLabelNet, generator: torch.Generator | None = None) -> None:
    """Zero bias, weights uniform in +-1/sqrt(fan_in): every score starts near 0.5."""
    fan_in = model.head.weight.shape[1]
    bound = 1.0 / math.sqrt(fan_in)
    w = torch.rand(model.head.weight.shape, generator=generator, dtype=model.head.weight.dtype)
    model.head.weight.copy_((2 * w - 1) * bound)
    model.head.bias.zero_()
