"""Figure emission for runs and sweeps.

All figures are written as PNG files with the run's config hash stamped
both in the PNG metadata and as a footnote on the canvas.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

GROUP_COLORS = {"many": "#4c72b0", "medium": "#dd8452", "few": "#c44e52"}


def _save(fig, path: str | Path, config_hash: str) -> Path:
    path = Path(path)
    fig.text(0.99, 0.01, f"config {config_hash}", ha="right", va="bottom",
             fontsize=6, color="gray")
    fig.savefig(path, dpi=120, metadata={"Software": f"config_hash={config_hash}"})
    plt.close(fig)
    return path


def _bar_colors(num_classes: int, split_sizes: tuple[int, int, int]) -> list[str]:
    colors = []
    for name, size in zip(("many", "medium", "few"), split_sizes):
        colors.extend([GROUP_COLORS[name]] * size)
    return colors[:num_classes]


def plot_classwise(values: list[float | None], ylabel: str, title: str,
                   path: str | Path, config_hash: str,
                   target_label: int | None = None) -> Path:
    """Per-class bar chart; a None entry (the ASR target class) is skipped."""
    k = len(values)
    first = int(np.ceil(k / 3))
    second = int(np.ceil(2 * k / 3))
    colors = _bar_colors(k, (first, second - first, k - second))
    fig, ax = plt.subplots(figsize=(6, 3.2))
    xs = [i for i, v in enumerate(values) if v is not None]
    ys = [values[i] for i in xs]
    ax.bar(xs, ys, color=[colors[i] for i in xs])
    if target_label is not None:
        ax.axvline(target_label, color="black", linestyle=":", linewidth=1)
    ax.set_xlabel("class")
    ax.set_ylabel(ylabel)
    ax.set_ylim(0, 1.0)
    ax.set_xticks(range(k))
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path, config_hash)


def plot_schedule(history: list[list[int]], s_max: int, path: str | Path,
                  config_hash: str) -> Path:
    """Strength score of every class across epochs: K series, one x-tick
    per epoch."""
    arr = np.asarray(history)  # (epochs+1, K)
    epochs = arr.shape[0] - 1
    fig, ax = plt.subplots(figsize=(6, 3.2))
    for k in range(arr.shape[1]):
        ax.plot(range(arr.shape[0]), arr[:, k], marker=".", label=f"class {k}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("strength s(k)")
    ax.set_ylim(-0.5, s_max + 0.5)
    ax.set_xticks(range(0, epochs + 1))
    ax.legend(fontsize=6, ncol=2)
    ax.set_title("augmentation strength schedule")
    fig.tight_layout()
    return _save(fig, path, config_hash)


def plot_sweep_curves(param: str, series: dict[str, list[tuple[int, float]]],
                      path: str | Path, config_hash: str) -> Path:
    """All-classes ASR over epochs, one curve per swept value."""
    fig, ax = plt.subplots(figsize=(6, 3.2))
    for label, points in series.items():
        xs, ys = zip(*points)
        ax.plot(xs, ys, marker=".", label=f"{param}={label}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("attack success rate (all classes)")
    ax.set_ylim(0, 1.0)
    ax.legend(fontsize=7)
    ax.set_title(f"sweep over {param}")
    fig.tight_layout()
    return _save(fig, path, config_hash)


def plot_sweep_summary(param: str, values: list[float],
                       asr_all: list[float], acc_all: list[float],
                       path: str | Path, config_hash: str) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.plot(values, asr_all, marker="o", label="ASR (all)")
    ax.plot(values, acc_all, marker="s", label="ACC (all)")
    ax.set_xlabel(param)
    ax.set_ylabel("rate")
    ax.set_ylim(0, 1.0)
    ax.legend(fontsize=8)
    ax.set_title(f"final metrics vs {param}")
    fig.tight_layout()
    return _save(fig, path, config_hash)


def render_trigger_grid(clean: torch.Tensor, triggers: torch.Tensor,
                        backdoored: torch.Tensor, path: str | Path,
                        config_hash: str) -> Path:
    """Rows of (clean, trigger, backdoored) triplets for inspection."""
    n = len(clean)
    fig, axes = plt.subplots(n, 3, figsize=(4.5, 1.5 * n), squeeze=False)
    for i in range(n):
        for j, (img, name) in enumerate(zip((clean[i], triggers[i], backdoored[i]),
                                            ("clean", "trigger", "backdoored"))):
            ax = axes[i][j]
            ax.imshow(img.permute(1, 2, 0).clamp(0, 1).numpy())
            ax.set_axis_off()
            if i == 0:
                ax.set_title(name, fontsize=8)
    fig.tight_layout()
    return _save(fig, path, config_hash)
