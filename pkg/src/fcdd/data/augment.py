"""Training-time augmentation and per-channel normalization."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from ..errors import ConfigurationError
from .dataset import Dataset


@dataclass(frozen=True)
class AugmentPolicy:
    """Augmentation steps, applied in field order.

    ``jitter`` is a per-channel affine color perturbation (scale in
    ``[1 - j, 1 + j]``, shift in ``[-j, j]``). ``crop`` takes a random
    ``crop x crop`` window after zero-padding by ``pad`` pixels. ``flip`` is
    the probability of a horizontal flip. ``mean``/``std`` normalize last.
    """

    jitter: float = 0.0
    crop: Optional[int] = None
    pad: int = 0
    flip: float = 0.0
    noise_std: float = 0.0
    mean: Optional[Tuple[float, ...]] = None
    std: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if self.jitter < 0 or self.pad < 0 or self.noise_std < 0:
            raise ConfigurationError("jitter, pad and noise_std must be non-negative")
        if not 0.0 <= self.flip <= 1.0:
            raise ConfigurationError("flip probability must lie in [0, 1]")
        if (self.mean is None) != (self.std is None):
            raise ConfigurationError("normalization needs both mean and std")
        if self.std is not None and min(self.std) <= 0:
            raise ConfigurationError("normalization std must be positive")


IDENTITY = AugmentPolicy()


def augment(image: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Apply ``policy`` to one ``(c, h, w)`` image."""
    return augment_pair(image, None, policy, rng)[0]


def augment_pair(
    image: np.ndarray,
    mask: Optional[np.ndarray],
    policy: AugmentPolicy,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Apply ``policy`` to an image, moving the mask along with crops and flips."""
    out = np.asarray(image)
    c, h, w = out.shape
    if policy.jitter:
        j = policy.jitter
        scale = rng.uniform(1 - j, 1 + j, c)[:, None, None]
        shift = rng.uniform(-j, j, c)[:, None, None]
        out = np.clip(out * scale + shift, 0.0, 1.0)
    if policy.crop is not None:
        p = policy.pad
        if policy.crop > h + 2 * p or policy.crop > w + 2 * p:
            raise ConfigurationError(f"crop {policy.crop} larger than padded image {h + 2 * p}x{w + 2 * p}")
        top = int(rng.integers(0, h + 2 * p - policy.crop + 1))
        left = int(rng.integers(0, w + 2 * p - policy.crop + 1))
        window = (slice(top, top + policy.crop), slice(left, left + policy.crop))
        out = np.pad(out, ((0, 0), (p, p), (p, p)))[(slice(None),) + window]
        if mask is not None:
            mask = np.pad(mask, ((p, p), (p, p)))[window]
    if policy.flip and rng.random() < policy.flip:
        out = out[:, :, ::-1]
        if mask is not None:
            mask = mask[:, ::-1]
    if policy.noise_std:
        out = out + rng.normal(0.0, policy.noise_std, out.shape)
    if policy.mean is not None:
        out = normalize(out, policy.mean, policy.std)
    out = np.ascontiguousarray(out, dtype=np.asarray(image).dtype)
    return out, None if mask is None else np.ascontiguousarray(mask)


def normalize(images: np.ndarray, mean, std) -> np.ndarray:
    """Channel-wise standardization of ``(c, h, w)`` or ``(n, c, h, w)`` arrays."""
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    shape = (-1, 1, 1)
    return (images - mean.reshape(shape)) / std.reshape(shape)


def channel_stats(dataset: Dataset) -> Tuple[Tuple[float, ...], Tuple[float, ...]]:
    """Per-channel mean and standard deviation over the nominal samples."""
    nominal = dataset.nominal()
    if len(nominal) == 0:
        raise ConfigurationError("normalization statistics need at least one nominal sample")
    x = nominal.images(np.float64)
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    std = np.where(std > 1e-8, std, 1.0)
    return tuple(float(v) for v in mean), tuple(float(v) for v in std)
