"""Clean accuracy and attack success rate, per class and per group.

Classes sorted by descending training count are split into Many, Medium
and Few thirds. ACC is measured on the clean test set; ASR on triggered
test images whose ground-truth label differs from the target, as the
fraction predicted as the target.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch

from .errors import ConfigError, DomainError
from .triggers import PatchSpec, TriggerGenerator, apply_fixed_patch_trigger, blend, generate_trigger

GROUP_NAMES = ("many", "medium", "few")


@dataclass(frozen=True)
class GroupSplit:
    many: tuple[int, ...]
    medium: tuple[int, ...]
    few: tuple[int, ...]

    @property
    def num_classes(self) -> int:
        return len(self.many) + len(self.medium) + len(self.few)

    def members(self, name: str) -> tuple[int, ...]:
        return getattr(self, name)


def group_split(num_classes: int) -> GroupSplit:
    """First ceil(K/3) classes are Many, next third Medium, rest Few.

    Assumes classes are already ordered by descending training count,
    which holds for every dataset this package builds.
    """
    if num_classes < 3:
        raise ConfigError(f"need at least 3 classes to split, got {num_classes}")
    first = math.ceil(num_classes / 3)
    second = math.ceil(2 * num_classes / 3)
    classes = tuple(range(num_classes))
    return GroupSplit(classes[:first], classes[first:second], classes[second:])


@dataclass
class MetricsReport:
    """Per-class and per-group ACC / ASR for one evaluation pass."""

    epoch: int
    target_label: int
    config_hash: str
    acc_per_class: list[float] = field(default_factory=list)
    asr_per_class: list[float | None] = field(default_factory=list)
    acc_groups: dict[str, float] = field(default_factory=dict)
    asr_groups: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "target_label": self.target_label,
            "config_hash": self.config_hash,
            "acc_per_class": self.acc_per_class,
            "asr_per_class": self.asr_per_class,
            "acc_groups": self.acc_groups,
            "asr_groups": self.asr_groups,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(epoch=d["epoch"], target_label=d["target_label"],
                   config_hash=d["config_hash"],
                   acc_per_class=list(d["acc_per_class"]),
                   asr_per_class=list(d["asr_per_class"]),
                   acc_groups=dict(d["acc_groups"]),
                   asr_groups=dict(d["asr_groups"]))


def _predict(model: torch.nn.Module, images: torch.Tensor,
             batch_size: int = 512) -> np.ndarray:
    was_training = model.training
    model.eval()
    preds = []
    try:
        with torch.no_grad():
            for start in range(0, len(images), batch_size):
                logits = model(images[start:start + batch_size])
                preds.append(logits.argmax(dim=1).numpy())
    finally:
        if was_training:
            model.train()
    return np.concatenate(preds)


def _group_means(per_class: Iterable[float | None],
                 split: GroupSplit) -> dict[str, float]:
    values = list(per_class)
    means: dict[str, float] = {}
    for name in GROUP_NAMES:
        members = [values[k] for k in split.members(name) if values[k] is not None]
        means[name] = float(np.mean(members)) if members else float("nan")
    valid = [v for v in values if v is not None]
    means["all"] = float(np.mean(valid))
    return means


def clean_accuracy_report(model: torch.nn.Module, images: torch.Tensor,
                          labels: torch.Tensor, split: GroupSplit
                          ) -> tuple[list[float], dict[str, float]]:
    """Per-class accuracy on clean test images plus group means."""
    labels_np = labels.numpy()
    preds = _predict(model, images)
    per_class: list[float] = []
    for k in range(split.num_classes):
        mask = labels_np == k
        if not mask.any():
            raise DomainError(f"test set has no samples of class {k}")
        per_class.append(float((preds[mask] == k).mean()))
    return per_class, _group_means(per_class, split)


def generator_trigger_fn(generator: TriggerGenerator,
                         alpha: float) -> Callable[[torch.Tensor], torch.Tensor]:
    """Deployment-style trigger: blend the raw test image with G(image)."""
    def fn(images: torch.Tensor) -> torch.Tensor:
        return blend(images, generate_trigger(generator, images), alpha)
    return fn


def patch_trigger_fn(patch: PatchSpec) -> Callable[[torch.Tensor], torch.Tensor]:
    def fn(images: torch.Tensor) -> torch.Tensor:
        return apply_fixed_patch_trigger(images, patch)
    return fn


def attack_success_report(model: torch.nn.Module, images: torch.Tensor,
                          labels: torch.Tensor, split: GroupSplit,
                          target_label: int,
                          trigger_fn: Callable[[torch.Tensor], torch.Tensor]
                          ) -> tuple[list[float | None], dict[str, float]]:
    """Per-source-class ASR plus group means.

    Test images whose true label is the target are excluded; the target
    class therefore reports None and group means skip it.
    """
    labels_np = labels.numpy()
    keep = labels_np != target_label
    if not keep.any():
        raise DomainError("test set contains only the target class")
    triggered = trigger_fn(images[keep])
    preds = _predict(model, triggered)
    kept_labels = labels_np[keep]
    per_class: list[float | None] = []
    for k in range(split.num_classes):
        if k == target_label:
            per_class.append(None)
            continue
        mask = kept_labels == k
        if not mask.any():
            raise DomainError(f"test set has no samples of class {k}")
        per_class.append(float((preds[mask] == target_label).mean()))
    return per_class, _group_means(per_class, split)


def evaluate(model: torch.nn.Module, images: torch.Tensor, labels: torch.Tensor,
             target_label: int,
             trigger_fn: Callable[[torch.Tensor], torch.Tensor],
             epoch: int = 0, config_hash: str = "") -> MetricsReport:
    """Full ACC + ASR report for one model snapshot."""
    split = group_split(int(labels.max()) + 1)
    acc_pc, acc_groups = clean_accuracy_report(model, images, labels, split)
    asr_pc, asr_groups = attack_success_report(model, images, labels, split,
                                               target_label, trigger_fn)
    return MetricsReport(epoch=epoch, target_label=target_label,
                         config_hash=config_hash,
                         acc_per_class=acc_pc, asr_per_class=asr_pc,
                         acc_groups=acc_groups, asr_groups=asr_groups)


def write_report_csv(path: str | Path, report: MetricsReport) -> None:
    """Final human-readable table: one row per metric, group columns."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash: {report.config_hash}\n")
        writer = csv.writer(fh)
        writer.writerow(["metric", "many", "medium", "few", "all"])
        for metric, groups in (("acc", report.acc_groups),
                               ("asr", report.asr_groups)):
            writer.writerow([metric] + [f"{groups[g]:.4f}"
                                        for g in ("many", "medium", "few", "all")])
        writer.writerow([])
        writer.writerow(["class", "acc", "asr"])
        for k, (a, s) in enumerate(zip(report.acc_per_class,
                                       report.asr_per_class)):
            writer.writerow([k, f"{a:.4f}", "" if s is None else f"{s:.4f}"])
