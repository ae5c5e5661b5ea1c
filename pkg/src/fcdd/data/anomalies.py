"""Sources of training anomalies: outlier exposure and confetti noise."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from ..errors import ConfigurationError
from .dataset import Sample

COLOR_MODES = ("random", "shift")


def sample_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent generator for one (seed, stream...) tuple.

    Per-sample streams make results independent of processing order.
    """
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, *(int(s) for s in stream)])


@dataclass(frozen=True)
class ConfettiConfig:
    """Blob count and side ranges (inclusive) and coloring.

    ``color_mode="random"`` paints each blob with a uniform random color,
    ``"shift"`` adds a per-blob offset of magnitude in
    ``[shift_min, shift_max]`` and random sign to the underlying pixels.
    """

    k_min: int = 1
    k_max: int = 4
    s_min: int = 2
    s_max: int = 8
    color_mode: str = "random"
    shift_min: float = 0.15
    shift_max: float = 0.35

    def __post_init__(self):
        if not 1 <= self.k_min <= self.k_max:
            raise ConfigurationError(f"blob count range [{self.k_min}, {self.k_max}] is invalid")
        if not 1 <= self.s_min <= self.s_max:
            raise ConfigurationError(f"blob side range [{self.s_min}, {self.s_max}] is invalid")
        if self.color_mode not in COLOR_MODES:
            raise ConfigurationError(f"color_mode must be one of {COLOR_MODES}")
        if not 0 <= self.shift_min <= self.shift_max:
            raise ConfigurationError("shift range must satisfy 0 <= shift_min <= shift_max")

    def check_image(self, h: int, w: int) -> None:
        if self.s_max > min(h, w) / 2:
            raise ConfigurationError(
                f"blob side up to {self.s_max} exceeds half the image extent {min(h, w)}"
            )


def confetti(image: np.ndarray, cfg: ConfettiConfig, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Paste axis-aligned square blobs into a ``(c, h, w)`` image.

    Returns the modified image (clamped to [0, 1]) and the boolean union of
    blob supports.
    """
    image = np.asarray(image)
    c, h, w = image.shape
    cfg.check_image(h, w)
    out = image.copy()
    mask = np.zeros((h, w), dtype=bool)
    for _ in range(rng.integers(cfg.k_min, cfg.k_max + 1)):
        side = int(rng.integers(cfg.s_min, cfg.s_max + 1))
        top = int(rng.integers(0, h - side + 1))
        left = int(rng.integers(0, w - side + 1))
        region = (slice(None), slice(top, top + side), slice(left, left + side))
        if cfg.color_mode == "random":
            out[region] = rng.random(c)[:, None, None]
        else:
            magnitude = rng.uniform(cfg.shift_min, cfg.shift_max)
            sign = rng.choice((-1.0, 1.0))
            out[region] = out[region] + sign * magnitude * rng.uniform(0.7, 1.0, c)[:, None, None]
        mask[top : top + side, left : left + side] = True
    np.clip(out, 0.0, 1.0, out=out)
    return out.astype(image.dtype, copy=False), mask


def oe_mix(
    batch: Sequence[Sample],
    oe_source: Sequence[Sample],
    p: float = 0.5,
    rng: np.random.Generator = None,
) -> List[Sample]:
    """Replace each nominal sample with probability ``p`` by a random outlier.

    Anomalous samples pass through untouched; replacements carry label 1 and
    keep the outlier's mask, if any.
    """
    if not 0.0 <= p <= 1.0:
        raise ConfigurationError(f"replacement probability must lie in [0, 1], got {p}")
    if p > 0 and len(oe_source) == 0:
        raise ConfigurationError("outlier exposure needs a non-empty auxiliary dataset")
    rng = rng if rng is not None else np.random.default_rng()
    out = []
    for sample in batch:
        if sample.label == 0 and p > 0 and rng.random() < p:
            pick = oe_source[int(rng.integers(len(oe_source)))]
            out.append(Sample(pick.image, 1, pick.gt_map))
        else:
            out.append(sample)
    return out


def inject_confetti(
    batch: Sequence[Sample],
    cfg: ConfettiConfig,
    p: float,
    rng: np.random.Generator,
) -> List[Sample]:
    """Turn each nominal sample into a confetti anomaly with probability ``p``."""
    out = []
    for sample in batch:
        if sample.label == 0 and rng.random() < p:
            image, mask = confetti(sample.image, cfg, rng)
            out.append(Sample(image, 1, mask))
        else:
            out.append(sample)
    return out
