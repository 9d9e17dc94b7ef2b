import numpy as np
import pytest
import torch
import torch.nn as nn

from ltbackdoor.augment import build_registry


class TinyModel(nn.Module):
    """Minimal classifier with the features/head split used by selectors."""

    def __init__(self, in_pixels: int, feature_dim: int, num_classes: int,
                 dtype=torch.float32, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.flatten = nn.Flatten()
        self.feat = nn.Linear(in_pixels, feature_dim, dtype=dtype)
        self.fc = nn.Linear(feature_dim, num_classes, dtype=dtype)
        self.feature_dim = feature_dim

    def features(self, x):
        return torch.tanh(self.feat(self.flatten(x)))

    def head(self, feats):
        return self.fc(feats)

    def forward(self, x):
        return self.head(self.features(x))


class OracleModel(nn.Module):
    """Predicts the true class perfectly via a label lookup by identity.

    Test-only stand-in: it maps any image to fixed logits favoring the
    label stored at construction, keyed by nearest stored image.
    """

    def __init__(self, images, labels, num_classes):
        super().__init__()
        self.store = images.flatten(1)
        self.labels = labels
        self.num_classes = num_classes

    def forward(self, x):
        flat = x.flatten(1)
        d = torch.cdist(flat, self.store)
        nearest = d.argmin(dim=1)
        logits = torch.zeros(len(x), self.num_classes)
        logits[torch.arange(len(x)), self.labels[nearest]] = 10.0
        return logits


class ConstantModel(nn.Module):
    """Always predicts one fixed class."""

    def __init__(self, cls: int, num_classes: int):
        super().__init__()
        self.cls = cls
        self.num_classes = num_classes

    def forward(self, x):
        logits = torch.zeros(len(x), self.num_classes)
        logits[:, self.cls] = 10.0
        return logits


@pytest.fixture
def registry():
    return build_registry()


@pytest.fixture
def small_registry():
    return build_registry(["rotate", "brightness", "solarize"], s_max=4)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def image():
    g = torch.Generator().manual_seed(42)
    return torch.rand(3, 16, 16, generator=g)
