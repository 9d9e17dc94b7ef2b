"""Sample-specific trigger generation, blending, and the diversity loss.

The generator is a small encoder-decoder producing a same-shape trigger
image in [0, 1]. A backdoored image is the alpha-blend of the (augmented)
input with its generated trigger. The diversity loss pushes distinct
inputs toward distinct triggers. A fixed-patch trigger is included as a
baseline comparator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .augment import AugmentRegistry, apply_pipeline
from .backdoor_selector import SelectorHead, choose_backdoor_ops
from .errors import DomainError


def _groupnorm(width: int) -> nn.GroupNorm:
    groups = 4 if width % 4 == 0 else 1
    return nn.GroupNorm(groups, width)


class TriggerGenerator(nn.Module):
    """Encoder-decoder mapping an image to a same-shape trigger in [0, 1].

    GroupNorm keeps inference batch-independent, so trigger generation is
    deterministic given the parameters. Input height and width must be
    divisible by 2**len(widths).
    """

    def __init__(self, channels: int = 3, widths: tuple[int, ...] = (16, 32, 64)):
        super().__init__()
        self.channels = channels
        self.widths = tuple(widths)
        enc = []
        ch = channels
        for w in widths:
            enc += [nn.Conv2d(ch, w, 4, stride=2, padding=1),
                    _groupnorm(w), nn.ReLU(inplace=True)]
            ch = w
        dec = []
        for w in reversed((channels,) + self.widths[:-1]):
            dec += [nn.ConvTranspose2d(ch, w, 4, stride=2, padding=1)]
            if w != channels:
                dec += [_groupnorm(w), nn.ReLU(inplace=True)]
            ch = w
        self.encoder = nn.Sequential(*enc)
        self.decoder = nn.Sequential(*dec)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        stride = 2 ** len(self.widths)
        if x.shape[-3] != self.channels:
            raise DomainError(
                f"generator expects {self.channels} channels, got {x.shape[-3]}")
        if x.shape[-2] % stride or x.shape[-1] % stride:
            raise DomainError(
                f"image size {tuple(x.shape[-2:])} not divisible by {stride}")
        return torch.sigmoid(self.decoder(self.encoder(x)))


def generate_trigger(generator: TriggerGenerator,
                     image: torch.Tensor) -> torch.Tensor:
    """Inference-only trigger for one image or a batch."""
    single = image.dim() == 3
    batch = image.unsqueeze(0) if single else image
    was_training = generator.training
    generator.eval()
    try:
        with torch.no_grad():
            out = generator(batch)
    finally:
        if was_training:
            generator.train()
    return out[0] if single else out


def blend(image: torch.Tensor, trigger: torch.Tensor,
          alpha: float) -> torch.Tensor:
    """(1 - alpha) * image + alpha * trigger, clamped to [0, 1]."""
    if image.shape != trigger.shape:
        raise DomainError(
            f"shape mismatch: image {tuple(image.shape)} vs trigger {tuple(trigger.shape)}")
    return ((1.0 - alpha) * image + alpha * trigger).clamp(0.0, 1.0)


def diversity_loss(generator: TriggerGenerator, x: torch.Tensor,
                   x_partner: torch.Tensor, x_aug: torch.Tensor | None = None,
                   x_partner_aug: torch.Tensor | None = None,
                   eps: float = 1e-6) -> torch.Tensor:
    """Mean over pairs of ||x - x'|| / (||G(x~) - G(x~')|| + eps).

    Numerator distances use the raw pair; the generator sees the
    augmented forms (defaulting to the raw images when no augmentation
    was applied). Norms are L2 over flattened pixels. Small values mean
    diverse triggers.
    """
    if len(x) == 0:
        raise DomainError("diversity loss needs a non-empty batch")
    if len(x) != len(x_partner):
        raise DomainError("pair batches must have equal length")
    x_aug = x if x_aug is None else x_aug
    x_partner_aug = x_partner if x_partner_aug is None else x_partner_aug
    numer = (x - x_partner).flatten(1).norm(dim=1)
    trig = generator(x_aug)
    trig_partner = generator(x_partner_aug)
    denom = (trig - trig_partner).flatten(1).norm(dim=1) + eps
    return (numer / denom).mean()


def augment_for_backdoor(images: torch.Tensor, head: SelectorHead,
                         model: nn.Module, registry: AugmentRegistry,
                         rng: np.random.Generator) -> torch.Tensor:
    """Apply per-sample selector-chosen operations to a batch."""
    out = []
    for img in images:
        ops = choose_backdoor_ops(head, model, img, registry, rng)
        out.append(apply_pipeline(registry, ops, img, rng))
    return torch.stack(out)


def make_backdoored_batch(images: torch.Tensor, head: SelectorHead,
                          model: nn.Module, generator: TriggerGenerator,
                          registry: AugmentRegistry, alpha: float,
                          target_label: int, rng: np.random.Generator
                          ) -> tuple[torch.Tensor, torch.Tensor]:
    """Backdoor a poison batch: augment, attach triggers, relabel.

    Pipeline per sample: selector-chosen weak augmentation, then blend
    with the generated trigger. Labels all become the target. The
    returned images stay in the generator's autograd graph so training
    can backpropagate into it.
    """
    augmented = augment_for_backdoor(images, head, model, registry, rng)
    triggers = generator(augmented)
    blended = blend(augmented, triggers, alpha)
    labels = torch.full((len(images),), target_label, dtype=torch.long)
    return blended, labels


@dataclass(frozen=True)
class PatchSpec:
    """Fixed patch trigger: size, corner position, and fill pattern."""

    size: int = 3
    position: str = "bottom-right"
    pattern: str = "checkerboard"

    def values(self, dtype: torch.dtype) -> torch.Tensor:
        if self.pattern == "checkerboard":
            ij = torch.arange(self.size)
            return ((ij[:, None] + ij[None, :]) % 2).to(dtype)
        if self.pattern == "white":
            return torch.ones(self.size, self.size, dtype=dtype)
        if self.pattern == "black":
            return torch.zeros(self.size, self.size, dtype=dtype)
        raise DomainError(f"unknown patch pattern {self.pattern!r}")


def apply_fixed_patch_trigger(image: torch.Tensor,
                              patch: PatchSpec) -> torch.Tensor:
    """Overwrite the patch region with the pattern; identical coordinates
    for every image."""
    if patch.size == 0:
        return image
    h, w = image.shape[-2], image.shape[-1]
    if patch.size < 0 or patch.size > h or patch.size > w:
        raise DomainError(f"patch size {patch.size} exceeds image {h}x{w}")
    anchors = {
        "top-left": (0, 0),
        "top-right": (0, w - patch.size),
        "bottom-left": (h - patch.size, 0),
        "bottom-right": (h - patch.size, w - patch.size),
    }
    if patch.position not in anchors:
        raise DomainError(f"unknown patch position {patch.position!r}")
    r, c = anchors[patch.position]
    out = image.clone()
    out[..., r:r + patch.size, c:c + patch.size] = patch.values(image.dtype)
    return out
