"""Registry of image augmentation operations with discrete strength levels.

An *operator* (rotate, brightness, ...) paired with a strength level
``s in {1..s_max}`` forms an *operation*. Strength 0 always denotes the
identity. All operators map float tensors of shape (C, H, W) with values
in [0, 1] to tensors of the same shape and range.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torchvision.transforms.functional as TF
from torchvision.transforms import InterpolationMode

from .errors import ConfigError, DomainError

_BILINEAR = InterpolationMode.BILINEAR


def _clamp(img: torch.Tensor) -> torch.Tensor:
    return img.clamp(0.0, 1.0)


def _signed(rng: np.random.Generator, value: float) -> float:
    # One rng draw per call keeps pipelines reproducible under a fixed seed.
    return value if rng.random() < 0.5 else -value


def _hflip(img, magnitude, rng):
    return TF.hflip(img)


def _rotate(img, magnitude, rng):
    angle = _signed(rng, magnitude)
    return TF.rotate(img, angle, interpolation=_BILINEAR, fill=[0.0])


def _translate_x(img, magnitude, rng):
    px = int(round(_signed(rng, magnitude) * img.shape[-1]))
    return TF.affine(img, angle=0.0, translate=[px, 0], scale=1.0,
                     shear=[0.0, 0.0], interpolation=_BILINEAR, fill=[0.0])


def _translate_y(img, magnitude, rng):
    px = int(round(_signed(rng, magnitude) * img.shape[-2]))
    return TF.affine(img, angle=0.0, translate=[0, px], scale=1.0,
                     shear=[0.0, 0.0], interpolation=_BILINEAR, fill=[0.0])


def _shear_x(img, magnitude, rng):
    deg = _signed(rng, magnitude)
    return TF.affine(img, angle=0.0, translate=[0, 0], scale=1.0,
                     shear=[deg, 0.0], interpolation=_BILINEAR, fill=[0.0])


def _shear_y(img, magnitude, rng):
    deg = _signed(rng, magnitude)
    return TF.affine(img, angle=0.0, translate=[0, 0], scale=1.0,
                     shear=[0.0, deg], interpolation=_BILINEAR, fill=[0.0])


def _brightness(img, magnitude, rng):
    return TF.adjust_brightness(img, 1.0 + _signed(rng, magnitude))


def _contrast(img, magnitude, rng):
    return TF.adjust_contrast(img, 1.0 + _signed(rng, magnitude))


def _saturation(img, magnitude, rng):
    return TF.adjust_saturation(img, 1.0 + _signed(rng, magnitude))


def _sharpness(img, magnitude, rng):
    return TF.adjust_sharpness(img, 1.0 + _signed(rng, magnitude))


def _posterize(img, magnitude, rng):
    # torchvision posterize is uint8-only; quantize float pixels directly.
    keep_bits = 8 - int(round(magnitude))
    mask = (0xFF << (8 - keep_bits)) & 0xFF
    bytes_ = (img * 255.0).floor().clamp(0, 255).to(torch.uint8)
    return (bytes_ & mask).to(img.dtype) / 255.0


def _solarize(img, magnitude, rng):
    return TF.solarize(img, 1.0 - magnitude)


def _equalize_channel(ch: np.ndarray) -> np.ndarray:
    # Classic per-channel histogram equalization on uint8 values.
    hist = np.bincount(ch.ravel(), minlength=256)
    nonzero = hist[hist > 0]
    if nonzero.size <= 1:
        return ch
    step = (int(hist.sum()) - int(nonzero[-1])) // 255
    if step == 0:
        return ch
    lut = np.empty(256, dtype=np.int64)
    n = step // 2
    for i in range(256):
        lut[i] = min(n // step, 255)
        n += int(hist[i])
    return lut[ch].astype(np.uint8)


def _equalize(img, magnitude, rng):
    bytes_ = (img * 255.0).round().clamp(0, 255).to(torch.uint8).numpy()
    out = np.stack([_equalize_channel(c) for c in bytes_])
    return torch.from_numpy(out).to(img.dtype) / 255.0


def _autocontrast(img, magnitude, rng):
    return TF.autocontrast(img)


@dataclass(frozen=True)
class AugOperatorSpec:
    """One named operator with a linear strength-to-parameter map.

    ``magnitude(s, s_max)`` returns the applied scalar parameter
    (degrees, factor delta, bits removed, ...), monotone non-decreasing
    in s. Parameterless operators (flip, equalize, autocontrast) ignore
    the magnitude and apply at full effect for any s >= 1.
    """

    name: str
    kind: str  # "geometric" | "photometric"
    max_magnitude: float
    apply_fn: Callable = field(repr=False)

    def magnitude(self, strength: int, s_max: int) -> float:
        return self.max_magnitude * strength / s_max


_OPERATOR_TABLE = {
    "hflip": AugOperatorSpec("hflip", "geometric", 1.0, _hflip),
    "rotate": AugOperatorSpec("rotate", "geometric", 30.0, _rotate),
    "translate-x": AugOperatorSpec("translate-x", "geometric", 0.3, _translate_x),
    "translate-y": AugOperatorSpec("translate-y", "geometric", 0.3, _translate_y),
    "shear-x": AugOperatorSpec("shear-x", "geometric", 15.0, _shear_x),
    "shear-y": AugOperatorSpec("shear-y", "geometric", 15.0, _shear_y),
    "brightness": AugOperatorSpec("brightness", "photometric", 0.9, _brightness),
    "contrast": AugOperatorSpec("contrast", "photometric", 0.9, _contrast),
    "saturation": AugOperatorSpec("saturation", "photometric", 0.9, _saturation),
    "sharpness": AugOperatorSpec("sharpness", "photometric", 0.9, _sharpness),
    "posterize": AugOperatorSpec("posterize", "photometric", 4.0, _posterize),
    "solarize": AugOperatorSpec("solarize", "photometric", 1.0, _solarize),
    "equalize": AugOperatorSpec("equalize", "photometric", 1.0, _equalize),
    "autocontrast": AugOperatorSpec("autocontrast", "photometric", 1.0, _autocontrast),
}

DEFAULT_OPERATORS = tuple(_OPERATOR_TABLE)


@dataclass(frozen=True)
class AugOperation:
    """Index of an operator in a registry plus a strength level (0 = identity)."""

    operator_id: int
    strength: int


@dataclass(frozen=True)
class OperationSlice:
    """All N operations of a registry at one fixed strength."""

    strength: int
    operations: tuple[AugOperation, ...]

    def __len__(self) -> int:
        return len(self.operations)


class AugmentRegistry:
    """Immutable collection of operators defining the operation set.

    The full set contains N * s_max non-identity operations, where N is
    the number of operators. Entries may be names from the default table
    or custom AugOperatorSpec instances.
    """

    def __init__(self, operators: Sequence[str | AugOperatorSpec] = DEFAULT_OPERATORS,
                 s_max: int = 10):
        if len(operators) < 1:
            raise ConfigError("registry needs at least one operator")
        if s_max < 1:
            raise ConfigError(f"s_max must be >= 1, got {s_max}")
        specs = []
        for op in operators:
            if isinstance(op, AugOperatorSpec):
                specs.append(op)
            elif op in _OPERATOR_TABLE:
                specs.append(_OPERATOR_TABLE[op])
            else:
                raise ConfigError(
                    f"unknown operator {op!r}; known: {sorted(_OPERATOR_TABLE)}")
        self._specs = tuple(specs)
        self._s_max = int(s_max)

    @property
    def operators(self) -> tuple[AugOperatorSpec, ...]:
        return self._specs

    @property
    def n_operators(self) -> int:
        return len(self._specs)

    @property
    def s_max(self) -> int:
        return self._s_max

    @property
    def n_operations(self) -> int:
        """Size of the non-identity operation set."""
        return self.n_operators * self._s_max

    def operations_at_strength(self, strength: int) -> OperationSlice:
        """All N operations at one strength level; strength 0 gives identities."""
        if not 0 <= strength <= self._s_max:
            raise DomainError(
                f"strength {strength} outside [0, {self._s_max}]")
        ops = tuple(AugOperation(i, strength) for i in range(self.n_operators))
        return OperationSlice(strength=strength, operations=ops)

    def apply(self, op: AugOperation, image: torch.Tensor,
              rng: np.random.Generator) -> torch.Tensor:
        """Apply a single operation; output is clamped to [0, 1]."""
        if image.dim() != 3:
            raise DomainError(f"expected (C, H, W) image, got shape {tuple(image.shape)}")
        if not 0 <= op.operator_id < self.n_operators:
            raise DomainError(f"operator_id {op.operator_id} not in registry")
        if not 0 <= op.strength <= self._s_max:
            raise DomainError(f"strength {op.strength} outside [0, {self._s_max}]")
        if op.strength == 0:
            return image
        spec = self._specs[op.operator_id]
        magnitude = spec.magnitude(op.strength, self._s_max)
        return _clamp(spec.apply_fn(image, magnitude, rng))


def build_registry(operators: Sequence[str | AugOperatorSpec] = DEFAULT_OPERATORS,
                   s_max: int = 10) -> AugmentRegistry:
    return AugmentRegistry(operators, s_max)


def apply_pipeline(registry: AugmentRegistry, ops: Sequence[AugOperation],
                   image: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    """Apply operations left to right. Empty pipeline returns the input."""
    out = image
    for op in ops:
        out = registry.apply(op, out, rng)
    return out
