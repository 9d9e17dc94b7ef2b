"""Classifier backbones exposing an explicit feature / final-layer split.

The selector loss aggregates penultimate features, so every backbone
provides ``features(x) -> (B, d)`` and ``head(features) -> logits`` with
``forward = head . features``. ``head`` is the single final fully
connected layer; ``features`` is everything before it.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError


class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNetClassifier(nn.Module):
    """CIFAR-style residual network with a configurable stage plan."""

    def __init__(self, num_classes: int, widths: tuple[int, ...] = (16, 32, 64),
                 blocks_per_stage: int = 1, in_channels: int = 3):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, widths[0], 3, stride=1, padding=1, bias=False),
            nn.BatchNorm2d(widths[0]),
            nn.ReLU(inplace=True),
        )
        stages = []
        ch = widths[0]
        for i, w in enumerate(widths):
            for b in range(blocks_per_stage):
                stride = 2 if (i > 0 and b == 0) else 1
                stages.append(BasicBlock(ch, w, stride))
                ch = w
        self.stages = nn.Sequential(*stages)
        self.feature_dim = ch
        self.fc = nn.Linear(ch, num_classes)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        out = self.stages(self.stem(x))
        out = F.adaptive_avg_pool2d(out, 1)
        return out.flatten(1)

    def head(self, feats: torch.Tensor) -> torch.Tensor:
        return self.fc(feats)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


_BACKBONES = {
    # desk-scale default: three stages, one block each
    "smallres": dict(widths=(16, 32, 64), blocks_per_stage=1),
    # 18-layer plan for full-scale runs
    "resnet18": dict(widths=(64, 128, 256, 512), blocks_per_stage=2),
}


def build_backbone(name: str, num_classes: int, in_channels: int = 3) -> ResNetClassifier:
    if name not in _BACKBONES:
        raise ConfigError(f"unknown backbone {name!r}; known: {sorted(_BACKBONES)}")
    return ResNetClassifier(num_classes, in_channels=in_channels, **_BACKBONES[name])
