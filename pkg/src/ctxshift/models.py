"""Backbones and the two-head classifier.

Every backbone is split into ``conv`` (input -> last convolutional feature
map, the Grad-CAM target) and ``neck`` (feature map -> feature vector).
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class LeNetEmbed(nn.Module):
    """LeNet-5 with a linear 2-d embedding in front of the classifier."""

    def __init__(self, in_channels: int = 1, embed_dim: int = 2):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(in_channels, 6, 5), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(6, 16, 5), nn.ReLU(),
        )
        self.neck = nn.Sequential(
            nn.MaxPool2d(2), nn.Flatten(),
            nn.Linear(16 * 4 * 4, 120), nn.ReLU(),
            nn.Linear(120, 84), nn.ReLU(),
            nn.Linear(84, embed_dim),
        )
        self.feature_dim = embed_dim

    def forward(self, x):
        return self.neck(self.conv(x))


class TinyConvNet(nn.Module):
    """Two 3x3 conv layers and a flatten; a few hundred parameters, for checks."""

    def __init__(self, in_channels: int = 1, width: int = 3, size: int = 4):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, padding=1), nn.Tanh(),
            nn.Conv2d(width, width, 3, padding=1), nn.Tanh(),
        )
        self.neck = nn.Sequential(nn.Flatten(), nn.Linear(width * size * size, 4), nn.Tanh())
        self.feature_dim = 4

    def forward(self, x):
        return self.neck(self.conv(x))


class _BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + (x if self.shortcut is None else self.shortcut(x)))


class ResNetCifar(nn.Module):
    """CIFAR ResNet (6n+2 layers); depth 32 gives ResNet-32."""

    def __init__(self, depth: int = 32, in_channels: int = 3):
        super().__init__()
        n = (depth - 2) // 6
        layers = [nn.Conv2d(in_channels, 16, 3, 1, 1, bias=False), nn.BatchNorm2d(16), nn.ReLU()]
        cin = 16
        for cout, stride in ((16, 1), (32, 2), (64, 2)):
            for i in range(n):
                layers.append(_BasicBlock(cin, cout, stride if i == 0 else 1))
                cin = cout
        self.conv = nn.Sequential(*layers)
        self.neck = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten())
        self.feature_dim = 64

    def forward(self, x):
        return self.neck(self.conv(x))


BACKBONES = {
    "lenet": LeNetEmbed,
    "tiny": TinyConvNet,
    "resnet32": lambda in_channels=3: ResNetCifar(32, in_channels),
}


def build_backbone(name: str, in_channels: int) -> nn.Module:
    try:
        factory = BACKBONES[name]
    except KeyError:
        raise ValueError(f"unknown backbone {name!r}; expected one of {sorted(BACKBONES)}") from None
    return factory(in_channels=in_channels)


class DualBranchModel(nn.Module):
    """Shared extractor with a uniform-sampling head and a balanced head."""

    HEADS = ("uniform", "balanced")

    def __init__(self, extractor: nn.Module, num_classes: int):
        super().__init__()
        self.extractor = extractor
        self.num_classes = num_classes
        self.head_uniform = nn.Linear(extractor.feature_dim, num_classes)
        self.head_balanced = nn.Linear(extractor.feature_dim, num_classes)

    @classmethod
    def from_name(cls, backbone: str, in_channels: int, num_classes: int) -> "DualBranchModel":
        return cls(build_backbone(backbone, in_channels), num_classes)

    def conv_features(self, x):
        return self.extractor.conv(x)

    def features_from_conv(self, fmap):
        return self.extractor.neck(fmap)

    def features(self, x):
        return self.extractor(x)

    def head(self, name: str) -> nn.Linear:
        if name == "uniform":
            return self.head_uniform
        if name == "balanced":
            return self.head_balanced
        raise ValueError(f"unknown head {name!r}")

    def head_logits(self, feats, head: str):
        return self.head(head)(feats)

    def forward(self, x, head: str = "balanced"):
        return self.head_logits(self.features(x), head)
