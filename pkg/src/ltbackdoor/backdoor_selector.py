"""Learned selection of weak augmentations for backdoored samples.

A linear head maps penultimate features to one logit per operator. The
temperature softmax of those logits ranks operations: high probability
marks operations unlikely to destroy the label. The head is trained with
a cross-entropy loss on probability-weighted aggregated features while
the backbone and classifier stay frozen.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .augment import AugOperation, AugmentRegistry, apply_pipeline
from .errors import ConfigError, DomainError


class SelectorHead(nn.Module):
    """Single FC layer scoring the N operators at one fixed strength."""

    def __init__(self, feature_dim: int, n_operators: int,
                 temperature: float = 1.0, strength: int = 1):
        super().__init__()
        if temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {temperature}")
        if strength < 0:
            raise ConfigError(f"strength must be >= 0, got {strength}")
        self.linear = nn.Linear(feature_dim, n_operators)
        self.temperature = float(temperature)
        self.strength = int(strength)

    @property
    def feature_dim(self) -> int:
        return self.linear.in_features

    @property
    def n_operators(self) -> int:
        return self.linear.out_features

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.linear(features)


@contextmanager
def _inference(*modules: nn.Module):
    """Eval mode + no parameter grads, restored on exit."""
    states = [(m, m.training) for m in modules]
    for m, _ in states:
        m.eval()
    try:
        yield
    finally:
        for m, was_training in states:
            if was_training:
                m.train()


@contextmanager
def _frozen_params(module: nn.Module):
    flags = [(p, p.requires_grad) for p in module.parameters()]
    for p, _ in flags:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, had_grad in flags:
            p.requires_grad_(had_grad)


def predict_op_probabilities(head: SelectorHead,
                             features: torch.Tensor) -> torch.Tensor:
    """Temperature softmax over the head logits; rows sum to 1."""
    if features.shape[-1] != head.feature_dim:
        raise DomainError(
            f"feature dim {features.shape[-1]} != head dim {head.feature_dim}")
    return torch.softmax(head(features) / head.temperature, dim=-1)


def _augmented_features(model: nn.Module, images: torch.Tensor,
                        registry: AugmentRegistry, strength: int,
                        rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """Frozen features of the raw batch and of its N augmented variants."""
    with _inference(model), torch.no_grad():
        feats = model.features(images)
        per_op = []
        for op in registry.operations_at_strength(strength).operations:
            aug = torch.stack([apply_pipeline(registry, [op], img, rng)
                               for img in images])
            per_op.append(model.features(aug))
        aug_feats = torch.stack(per_op, dim=1)  # (B, N, d)
    return feats, aug_feats


def _loss_from_features(head: SelectorHead, model: nn.Module,
                        feats: torch.Tensor, aug_feats: torch.Tensor,
                        labels: torch.Tensor) -> torch.Tensor:
    probs = torch.softmax(head(feats) / head.temperature, dim=1)
    aggregated = (probs.unsqueeze(-1) * aug_feats).sum(dim=1)
    with _frozen_params(model):
        logits = model.head(aggregated)
    return F.cross_entropy(logits, labels)


def selector_loss(head: SelectorHead, model: nn.Module, images: torch.Tensor,
                  labels: torch.Tensor, registry: AugmentRegistry,
                  rng: np.random.Generator) -> torch.Tensor:
    """Cross entropy of the classifier on probability-aggregated features.

    Backbone and classifier are frozen; the returned loss only carries
    gradient for the head parameters.
    """
    if not 0 <= head.strength <= registry.s_max:
        raise DomainError(
            f"strength {head.strength} outside [0, {registry.s_max}]")
    feats, aug_feats = _augmented_features(model, images, registry,
                                           head.strength, rng)
    return _loss_from_features(head, model, feats, aug_feats, labels)


def train_selector_head(head: SelectorHead, model: nn.Module,
                        images: torch.Tensor, labels: torch.Tensor,
                        registry: AugmentRegistry, steps: int,
                        rng: np.random.Generator, lr: float = 0.01,
                        optimizer: torch.optim.Optimizer | None = None) -> list[float]:
    """Adam steps on the selector loss with cached frozen features.

    Features are computed once per call: the backbone does not change
    while the head trains. Returns the per-step losses.
    """
    if steps == 0:
        return []
    if optimizer is None:
        optimizer = torch.optim.Adam(head.parameters(), lr=lr)
    feats, aug_feats = _augmented_features(model, images, registry,
                                           head.strength, rng)
    losses = []
    for _ in range(steps):
        optimizer.zero_grad()
        loss = _loss_from_features(head, model, feats, aug_feats, labels)
        loss.backward()
        optimizer.step()
        losses.append(float(loss.detach()))
    return losses


def weighted_draw_without_replacement(probs: np.ndarray, count: int,
                                      rng: np.random.Generator) -> list[int]:
    """Sequential renormalized draws of `count` distinct indices."""
    remaining = np.array(probs, dtype=float)
    picks: list[int] = []
    for _ in range(count):
        p = remaining / remaining.sum()
        i = int(rng.choice(len(p), p=p))
        picks.append(i)
        remaining[i] = 0.0
    return picks


def choose_backdoor_ops(head: SelectorHead, model: nn.Module,
                        image: torch.Tensor, registry: AugmentRegistry,
                        rng: np.random.Generator) -> list[AugOperation]:
    """n(q) = q distinct operations at strength q, weighted by head output."""
    q = head.strength
    if q > registry.n_operators:
        raise ConfigError(
            f"q={q} exceeds the {registry.n_operators} available operators")
    if q == 0:
        return []
    with _inference(model, head), torch.no_grad():
        feats = model.features(image.unsqueeze(0))
        probs = predict_op_probabilities(head, feats)[0].numpy()
    ops = registry.operations_at_strength(q).operations
    return [ops[i] for i in weighted_draw_without_replacement(probs, q, rng)]
