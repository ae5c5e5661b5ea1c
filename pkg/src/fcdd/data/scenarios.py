"""Procedural benchmark datasets.

``texture``
    Nominal images are oriented stripe textures mixed with smooth value
    noise. Anomalous test images carry confetti defects whose union is the
    ground-truth mask.

``watermark``
    Nominal images show a disk on a noisy background. The anomalous class
    shows a slightly elongated ellipse and, with probability ``correlation``,
    a small fixed glyph in the lower-left corner. Masks mark the object, not
    the glyph, so a detector keyed on the glyph is caught out.

Every image is drawn from its own ``(seed, split, index)`` random stream, so
regeneration is bit-identical and independent of generation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from ..errors import ConfigurationError
from .anomalies import ConfettiConfig, confetti, sample_rng
from .dataset import Dataset, Sample

SCENARIOS = ("texture", "watermark")

_SPLIT_TRAIN, _SPLIT_TEST, _SPLIT_TRAIN_ANOM = 0, 1, 2

GLYPH = np.array(
    [
        [1, 0, 0, 0, 0, 1],
        [1, 0, 0, 0, 0, 1],
        [1, 0, 1, 1, 0, 1],
        [1, 1, 0, 0, 1, 1],
        [1, 0, 0, 0, 0, 1],
        [0, 1, 1, 1, 1, 0],
    ],
    dtype=bool,
)


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str = "texture"
    image_size: int = 64
    n_train: int = 400
    n_test_nominal: int = 100
    n_test_anomalous: int = 100
    n_train_anomalous: int = 0
    seed: int = 0
    # texture family
    stripe_period: float = 8.0
    orientation_jitter: float = 0.08
    noise_amplitude: float = 0.08
    pixel_noise: float = 0.02
    defects: ConfettiConfig = field(
        default_factory=lambda: ConfettiConfig(2, 5, 2, 6, "shift", 0.06, 0.18)
    )
    # watermark scenario
    correlation: float = 1.0
    test_watermark: bool = True

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigurationError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.n_train < 1 or self.n_test_nominal < 1 or self.n_test_anomalous < 1:
            raise ConfigurationError("train and test counts must be at least 1")
        if self.n_train_anomalous < 0:
            raise ConfigurationError("n_train_anomalous must be >= 0")
        if self.image_size < 16:
            raise ConfigurationError("image_size must be at least 16")
        if not 0.0 <= self.correlation <= 1.0:
            raise ConfigurationError("correlation must lie in [0, 1]")
        if self.stripe_period <= 0 or self.noise_amplitude < 0 or self.pixel_noise < 0:
            raise ConfigurationError("texture parameters must be non-negative (period positive)")
        if self.scenario == "texture":
            self.defects.check_image(self.image_size, self.image_size)


# texture --------------------------------------------------------------------

def _value_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    """Smooth noise in [-1, 1]: a coarse random grid, bilinearly upsampled."""
    grid = rng.uniform(-1, 1, (cells + 1, cells + 1))
    t = np.linspace(0, cells, size, endpoint=False)
    i = t.astype(int)
    f = t - i
    f = f * f * (3 - 2 * f)
    rows = grid[i] * (1 - f)[:, None] + grid[i + 1] * f[:, None]
    return rows[:, i] * (1 - f)[None, :] + rows[:, i + 1] * f[None, :]


def texture_image(cfg: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    n = cfg.image_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    theta = np.pi / 4 + rng.normal(0, cfg.orientation_jitter)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / cfg.stripe_period + phase)
    noise = _value_noise(rng, n, 4)
    base = np.array([0.55, 0.45, 0.35]) + rng.normal(0, 0.02, 3)
    tint = np.array([0.18, 0.15, 0.1])
    img = base[:, None, None] + tint[:, None, None] * wave + cfg.noise_amplitude * noise
    img = img + rng.normal(0, cfg.pixel_noise, img.shape)
    return np.clip(img, 0, 1).astype(np.float32)


def _texture(cfg: ScenarioConfig) -> Tuple[Dataset, Dataset]:
    train = [Sample(texture_image(cfg, sample_rng(cfg.seed, _SPLIT_TRAIN, i)), 0) for i in range(cfg.n_train)]
    for i in range(cfg.n_train_anomalous):
        rng = sample_rng(cfg.seed, _SPLIT_TRAIN_ANOM, i)
        image, mask = confetti(texture_image(cfg, rng), cfg.defects, rng)
        train.append(Sample(image, 1, mask))
    test = []
    n_nom = cfg.n_test_nominal
    for i in range(n_nom + cfg.n_test_anomalous):
        rng = sample_rng(cfg.seed, _SPLIT_TEST, i)
        image = texture_image(cfg, rng)
        if i < n_nom:
            test.append(Sample(image, 0, np.zeros(image.shape[1:], bool)))
        else:
            image, mask = confetti(image, cfg.defects, rng)
            test.append(Sample(image, 1, mask))
    return Dataset(train), Dataset(test)


# watermark ------------------------------------------------------------------

def _ellipse_mask(n: int, cy: float, cx: float, ry: float, rx: float, angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(angle), np.sin(angle)
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    return u * u + v * v <= 1.0


def glyph_region(n: int) -> Tuple[slice, slice]:
    """Rows and columns covered by the lower-left watermark glyph."""
    gh, gw = GLYPH.shape
    return slice(n - gh - 2, n - 2), slice(2, 2 + gw)


def watermark_image(
    cfg: ScenarioConfig, rng: np.random.Generator, anomalous: bool, with_glyph: bool
) -> Tuple[np.ndarray, np.ndarray]:
    n = cfg.image_size
    bg = np.array([0.35, 0.45, 0.35]) + rng.normal(0, 0.05, 3)
    img = bg[:, None, None] + 0.12 * _value_noise(rng, n, 3)[None] + rng.normal(0, 0.03, (3, n, n))
    radius = rng.uniform(0.18, 0.24) * n
    margin = radius + 1
    cy = rng.uniform(margin, n - margin - 0.25 * n)
    cx = rng.uniform(margin + 0.2 * n, n - margin)
    if anomalous:
        ratio = rng.uniform(1.15, 1.3)
        mask = _ellipse_mask(n, cy, cx, radius / ratio, radius * ratio, rng.uniform(0, np.pi))
    else:
        mask = _ellipse_mask(n, cy, cx, radius, radius, 0.0)
    color = np.array([0.75, 0.55, 0.3]) + rng.normal(0, 0.06, 3)
    img[:, mask] = color[:, None] + rng.normal(0, 0.03, (3, int(mask.sum())))
    glyph_on = rng.random() < cfg.correlation
    if anomalous and with_glyph and glyph_on:
        rows, cols = glyph_region(n)
        patch = img[:, rows, cols]
        patch[:, GLYPH] = 0.95
        img[:, rows, cols] = patch
    return np.clip(img, 0, 1).astype(np.float32), mask


def _watermark(cfg: ScenarioConfig) -> Tuple[Dataset, Dataset]:
    n = cfg.image_size
    train = []
    for i in range(cfg.n_train):
        image, _ = watermark_image(cfg, sample_rng(cfg.seed, _SPLIT_TRAIN, i), False, False)
        train.append(Sample(image, 0))
    for i in range(cfg.n_train_anomalous):
        image, mask = watermark_image(cfg, sample_rng(cfg.seed, _SPLIT_TRAIN_ANOM, i), True, True)
        train.append(Sample(image, 1, mask))
    test = []
    n_nom = cfg.n_test_nominal
    for i in range(n_nom + cfg.n_test_anomalous):
        rng = sample_rng(cfg.seed, _SPLIT_TEST, i)
        anomalous = i >= n_nom
        image, mask = watermark_image(cfg, rng, anomalous, cfg.test_watermark)
        test.append(Sample(image, int(anomalous), mask if anomalous else np.zeros((n, n), bool)))
    return Dataset(train), Dataset(test)


def synth_scenario(cfg: ScenarioConfig) -> Tuple[Dataset, Dataset]:
    """Generate ``(train, test)`` datasets for a scenario configuration.

    ``train`` holds ``n_train`` nominal images followed by
    ``n_train_anomalous`` labeled anomalies with masks.
    """
    if cfg.scenario == "texture":
        return _texture(cfg)
    return _watermark(cfg)
