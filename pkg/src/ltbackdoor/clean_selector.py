"""Class-wise augmentation strength scheduling for clean samples.

Each class k carries an integer strength score s(k). Once per epoch the
score moves up by one if the class accuracy on the selector set beats a
threshold gamma, otherwise down by one, clamped to [0, s_max]. Clean
samples of class k are then augmented with n(k) = s(k) operations drawn
uniformly from the operations at strength s(k).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch

from .augment import AugOperation, AugmentRegistry, apply_pipeline
from .errors import DomainError


@dataclass(frozen=True)
class StrengthSchedule:
    """Per-class strength scores with their epoch-by-epoch history."""

    scores: tuple[int, ...]
    gamma: float
    s_max: int
    epoch: int = 0
    history: tuple[tuple[int, ...], ...] = ()

    @property
    def num_classes(self) -> int:
        return len(self.scores)

    def strength(self, class_index: int) -> int:
        return self.scores[class_index]


def initial_schedule(num_classes: int, s_max: int, gamma: float) -> StrengthSchedule:
    """All-zero schedule: training starts on unaugmented data."""
    scores = (0,) * num_classes
    return StrengthSchedule(scores=scores, gamma=gamma, s_max=s_max,
                            epoch=0, history=(scores,))


def update_strengths(schedule: StrengthSchedule,
                     acc: np.ndarray) -> StrengthSchedule:
    """One +1 / -1 step per class against the gamma threshold, clamped."""
    acc = np.asarray(acc, dtype=float)
    if acc.shape != (schedule.num_classes,):
        raise DomainError(
            f"acc has shape {acc.shape}, schedule has {schedule.num_classes} classes")
    scores = np.asarray(schedule.scores)
    stepped = np.where(acc > schedule.gamma, scores + 1, scores - 1)
    clamped = tuple(int(v) for v in np.clip(stepped, 0, schedule.s_max))
    return replace(schedule, scores=clamped, epoch=schedule.epoch + 1,
                   history=schedule.history + (clamped,))


def choose_clean_ops(schedule: StrengthSchedule, class_index: int,
                     registry: AugmentRegistry,
                     rng: np.random.Generator) -> list[AugOperation]:
    """n(k) = s(k) operations at strength s(k), uniform, without replacement.

    If s(k) exceeds the number of operators, the excess is drawn with
    replacement.
    """
    strength = schedule.strength(class_index)
    if strength == 0:
        return []
    ops = registry.operations_at_strength(strength).operations
    n = len(ops)
    take = min(strength, n)
    chosen = list(rng.choice(n, size=take, replace=False))
    if strength > n:
        chosen.extend(rng.choice(n, size=strength - n, replace=True))
    return [ops[i] for i in chosen]


def evaluate_class_accuracy(model: torch.nn.Module, images: torch.Tensor,
                            labels: torch.Tensor, schedule: StrengthSchedule,
                            registry: AugmentRegistry,
                            rng: np.random.Generator) -> np.ndarray:
    """Per-class accuracy on the selector set under the current schedule.

    Images of class k are augmented with s(k) operations drawn fresh per
    image before scoring. The model is only read.
    """
    labels_np = labels.numpy()
    accs = np.zeros(schedule.num_classes)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for k in range(schedule.num_classes):
                idx = np.nonzero(labels_np == k)[0]
                if len(idx) == 0:
                    raise DomainError(f"selector set has no samples of class {k}")
                augmented = []
                for i in idx:
                    ops = choose_clean_ops(schedule, k, registry, rng)
                    augmented.append(apply_pipeline(registry, ops, images[i], rng))
                batch = torch.stack(augmented)
                pred = model(batch).argmax(dim=1)
                accs[k] = float((pred == k).float().mean())
    finally:
        if was_training:
            model.train()
    return accs
