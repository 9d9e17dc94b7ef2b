"""Long-tailed dataset construction, poison-subset selection, and corpus IO.

Datasets are held as float tensors of shape (M, C, H, W) with values in
[0, 1]. Class counts are non-increasing in the class index, so class 0 is
the largest head class.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, DomainError


@dataclass(frozen=True)
class ClassProfile:
    class_index: int
    count: int


@dataclass(frozen=True)
class PoisonPlan:
    """Poison subset membership plus the all-to-one label map.

    ``poison_indices`` index into the owning dataset. ``relabel`` is the
    constant map eta sending every ground-truth label to the target.
    """

    poison_indices: tuple[int, ...]
    rate: float
    target_label: int

    def __post_init__(self):
        object.__setattr__(self, "_member", frozenset(self.poison_indices))

    def relabel(self, label: int) -> int:
        return self.target_label

    def __contains__(self, index: int) -> bool:
        return index in self._member

    def __len__(self) -> int:
        return len(self.poison_indices)

    def clean_indices(self, n_total: int) -> np.ndarray:
        """Indices of the clean view, the complement of the poison subset."""
        mask = np.ones(n_total, dtype=bool)
        if self.poison_indices:
            mask[list(self.poison_indices)] = False
        return np.nonzero(mask)[0]


class LongTailDataset:
    """Immutable imbalanced dataset with per-class profiles."""

    def __init__(self, images: torch.Tensor, labels: torch.Tensor, source: str):
        if images.dim() != 4:
            raise ConfigError(f"expected (M, C, H, W) images, got {tuple(images.shape)}")
        if len(images) != len(labels):
            raise ConfigError("images and labels length mismatch")
        self.images = images
        self.labels = labels
        self.source = source
        labels_np = labels.numpy()
        self.num_classes = int(labels_np.max()) + 1
        self._class_indices = [np.nonzero(labels_np == k)[0]
                               for k in range(self.num_classes)]
        self.counts = np.array([len(ix) for ix in self._class_indices])
        self.profiles = tuple(ClassProfile(k, int(c))
                              for k, c in enumerate(self.counts))

    def __len__(self) -> int:
        return len(self.images)

    def indices_of_class(self, k: int) -> np.ndarray:
        if not 0 <= k < self.num_classes:
            raise DomainError(f"class {k} outside [0, {self.num_classes})")
        return self._class_indices[k]

    @property
    def imbalance_ratio(self) -> float:
        return float(self.counts.max() / self.counts.min())


def longtail_counts(n_max: int, num_classes: int, ir: float,
                    profile: str = "exp") -> np.ndarray:
    """Per-class sample counts, non-increasing, with n_0 / n_{K-1} ~ ir."""
    if ir < 1:
        raise ConfigError(f"imbalance ratio must be >= 1, got {ir}")
    if profile == "exp":
        if num_classes == 1 or ir == 1:
            counts = np.full(num_classes, n_max)
        else:
            exponents = np.arange(num_classes) / (num_classes - 1)
            counts = np.round(n_max * ir ** (-exponents)).astype(int)
    elif profile == "step":
        half = num_classes // 2
        counts = np.full(num_classes, int(round(n_max / ir)))
        counts[:num_classes - half] = n_max
    else:
        raise ConfigError(f"unknown profile {profile!r}; use 'exp' or 'step'")
    if counts.min() < 1:
        raise ConfigError("profile yields an empty class; lower ir or raise n_max")
    return counts


def build_longtail(images: torch.Tensor, labels: torch.Tensor, ir: float,
                   rng: np.random.Generator, n_max: int | None = None,
                   profile: str = "exp", source: str = "unknown") -> LongTailDataset:
    """Subsample a balanced dataset into an imbalanced one.

    Keeps round(n_max * ir^(-(k)/(K-1))) samples of class k, drawn
    uniformly without replacement from the source class.
    """
    labels_np = labels.numpy() if isinstance(labels, torch.Tensor) else np.asarray(labels)
    num_classes = int(labels_np.max()) + 1
    available = np.bincount(labels_np, minlength=num_classes)
    if n_max is None:
        n_max = int(available.min())
    counts = longtail_counts(n_max, num_classes, ir, profile)
    if (available < counts).any():
        short = int(np.nonzero(available < counts)[0][0])
        raise ConfigError(
            f"class {short} has {available[short]} samples, profile needs {counts[short]}")
    keep: list[np.ndarray] = []
    for k in range(num_classes):
        pool = np.nonzero(labels_np == k)[0]
        keep.append(np.sort(rng.choice(pool, size=counts[k], replace=False)))
    order = np.concatenate(keep)
    labels_t = torch.as_tensor(labels_np[order], dtype=torch.long)
    return LongTailDataset(images[order].clone(), labels_t, source=source)


def select_poison_subset(dataset: LongTailDataset, rate: float,
                         target_label: int, rng: np.random.Generator) -> PoisonPlan:
    """Uniform sample of round(rate * |D|) indices, label-agnostic.

    Because the draw is uniform over the dataset, the poison subset
    inherits the class imbalance of the training data.
    """
    if not 0 < rate < 1:
        raise ConfigError(f"poison rate must be in (0, 1), got {rate}")
    if not 0 <= target_label < dataset.num_classes:
        raise ConfigError(f"target label {target_label} outside class range")
    n_poison = int(round(rate * len(dataset)))
    if n_poison < 1:
        raise ConfigError(f"rate {rate} selects no samples from |D|={len(dataset)}")
    indices = rng.choice(len(dataset), size=n_poison, replace=False)
    return PoisonPlan(tuple(int(i) for i in np.sort(indices)),
                      rate=rate, target_label=target_label)


def empty_poison_plan(target_label: int) -> PoisonPlan:
    """Degenerate plan for no-poison control runs."""
    return PoisonPlan((), rate=0.0, target_label=target_label)


def sample_selector_set(dataset: LongTailDataset, per_class: int,
                        rng: np.random.Generator) -> np.ndarray:
    """Indices of min(per_class, n_k) samples from every class.

    The selector set is used only for selector updates; samples stay in
    the training data.
    """
    if per_class < 1:
        raise ConfigError(f"per_class must be >= 1, got {per_class}")
    picks = []
    for k in range(dataset.num_classes):
        pool = dataset.indices_of_class(k)
        take = min(per_class, len(pool))
        picks.append(rng.choice(pool, size=take, replace=False))
    return np.concatenate(picks)


def make_synthetic_corpus(num_classes: int, per_class: int, image_size: int = 16,
                          channels: int = 3, seed: int = 0,
                          noise: float = 0.06) -> tuple[torch.Tensor, torch.Tensor]:
    """Balanced procedural corpus of oriented, colored gratings.

    Class identity is carried by grating orientation, spatial frequency
    and a class color; samples vary in phase, amplitude, brightness and
    pixel noise. Small nets separate the classes within a few epochs,
    which keeps end-to-end experiments desk-sized.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, image_size),
                         np.linspace(0, 1, image_size), indexing="ij")
    colors = 0.35 + 0.65 * rng.random((num_classes, channels))
    images = np.empty((num_classes * per_class, channels, image_size, image_size),
                      dtype=np.float32)
    labels = np.repeat(np.arange(num_classes), per_class)
    for k in range(num_classes):
        theta = np.pi * k / num_classes
        freq = 1.5 + (k % 3)
        for j in range(per_class):
            phase = rng.uniform(0, 2 * np.pi)
            jitter = rng.normal(0, 0.04)
            amp = 0.30 + 0.15 * rng.random()
            coord = np.cos(theta + jitter) * xx + np.sin(theta + jitter) * yy
            base = 0.5 + amp * np.sin(2 * np.pi * freq * coord + phase)
            img = base[None, :, :] * colors[k][:, None, None]
            img = img + rng.uniform(-0.08, 0.08)
            img = img + rng.normal(0, noise, img.shape)
            images[k * per_class + j] = np.clip(img, 0.0, 1.0)
    return torch.from_numpy(images), torch.from_numpy(labels).long()


def load_packed(path: str | Path) -> tuple[torch.Tensor, torch.Tensor]:
    """Load a packed .npz corpus with arrays ``images`` and ``labels``.

    Accepts (M, C, H, W) or (M, H, W, C) layouts, float in [0, 1] or uint8.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"dataset file not found: {path}")
    with np.load(path) as packed:
        if "images" not in packed or "labels" not in packed:
            raise ConfigError(f"{path} must contain 'images' and 'labels' arrays")
        images = packed["images"]
        labels = packed["labels"]
    if images.ndim != 4:
        raise ConfigError(f"images must be 4-D, got shape {images.shape}")
    if images.shape[-1] in (1, 3) and images.shape[1] not in (1, 3):
        images = images.transpose(0, 3, 1, 2)
    if images.dtype == np.uint8:
        images = images.astype(np.float32) / 255.0
    images = np.ascontiguousarray(images, dtype=np.float32)
    if images.min() < 0 or images.max() > 1:
        raise ConfigError("image values must lie in [0, 1] (or be uint8)")
    return torch.from_numpy(images), torch.from_numpy(np.asarray(labels)).long()


def load_image_folder(path: str | Path,
                      image_size: int | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Load a directory of per-class subfolders of image files.

    Class indices follow the sorted subfolder names; files are sorted
    within each class so loading is order-stable.
    """
    from PIL import Image

    root = Path(path)
    if not root.is_dir():
        raise ConfigError(f"dataset directory not found: {root}")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise ConfigError(f"{root} has no class subdirectories")
    images, labels = [], []
    for k, cdir in enumerate(class_dirs):
        files = sorted(f for f in cdir.iterdir()
                       if f.suffix.lower() in {".png", ".jpg", ".jpeg", ".bmp"})
        if not files:
            raise ConfigError(f"class directory {cdir} has no image files")
        for f in files:
            img = Image.open(f).convert("RGB")
            if image_size is not None:
                img = img.resize((image_size, image_size), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.float32) / 255.0
            images.append(arr.transpose(2, 0, 1))
            labels.append(k)
    return (torch.from_numpy(np.stack(images)),
            torch.from_numpy(np.asarray(labels)).long())


def write_manifest(path: str | Path, dataset: LongTailDataset, plan: PoisonPlan,
                   seed: int, config_hash: str) -> None:
    """Persist the reproducibility manifest for one run."""
    manifest = {
        "config_hash": config_hash,
        "seed": seed,
        "source": dataset.source,
        "num_classes": dataset.num_classes,
        "class_counts": [int(c) for c in dataset.counts],
        "imbalance_ratio": dataset.imbalance_ratio,
        "poison": {
            "rate": plan.rate,
            "target_label": plan.target_label,
            "count": len(plan),
            "indices": list(plan.poison_indices),
        },
    }
    Path(path).write_text(json.dumps(manifest, indent=2) + "\n")
