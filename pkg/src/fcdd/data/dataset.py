"""Samples, datasets and the on-disk dataset layout.

A dataset directory holds ``index.csv`` with columns ``file,label,mask_file``
(mask optional) next to binary PGM/PPM images. Masks are PGM files with
values 0 and 255.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Union

import numpy as np

from ..errors import ConfigurationError, LoadError
from . import pnm

INDEX_NAME = "index.csv"
INDEX_COLUMNS = ("file", "label", "mask_file")


@dataclass
class Sample:
    """One image ``(c, h, w)`` in [0, 1] with label and optional binary mask."""

    image: np.ndarray
    label: int
    gt_map: Optional[np.ndarray] = None

    def __post_init__(self):
        self.image = np.asarray(self.image)
        if self.image.ndim != 3:
            raise ConfigurationError(f"sample image must be (c, h, w), got {self.image.shape}")
        if self.label not in (0, 1):
            raise ConfigurationError(f"label must be 0 or 1, got {self.label}")
        self.label = int(self.label)
        if self.gt_map is not None:
            self.gt_map = np.asarray(self.gt_map).astype(bool)
            if self.gt_map.shape != self.image.shape[1:]:
                raise ConfigurationError(
                    f"mask shape {self.gt_map.shape} does not match image {self.image.shape[1:]}"
                )
            if self.label == 0 and self.gt_map.any():
                raise ConfigurationError("nominal samples cannot carry anomalous mask pixels")


class Dataset(Sequence[Sample]):
    """An ordered collection of samples sharing one image shape."""

    def __init__(self, samples: Sequence[Sample] = ()):
        self.samples: List[Sample] = list(samples)
        shapes = {s.image.shape for s in self.samples}
        if len(shapes) > 1:
            raise ConfigurationError(f"samples have differing image shapes {sorted(shapes)}")

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return Dataset(self.samples[i])
        return self.samples[i]

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset([self.samples[i] for i in indices])

    def __add__(self, other: "Dataset") -> "Dataset":
        return Dataset(self.samples + list(other))

    @property
    def image_shape(self):
        return self.samples[0].image.shape if self.samples else None

    @property
    def has_masks(self) -> bool:
        return any(s.gt_map is not None for s in self.samples)

    def images(self, dtype=np.float32) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, 0, 0, 0), dtype=dtype)
        return np.stack([s.image for s in self.samples]).astype(dtype)

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def gt_maps(self) -> np.ndarray:
        """Masks as a boolean ``(n, h, w)`` array; missing masks read as all-zero."""
        if not self.samples:
            return np.zeros((0, 0, 0), dtype=bool)
        h, w = self.image_shape[1:]
        return np.stack(
            [s.gt_map if s.gt_map is not None else np.zeros((h, w), bool) for s in self.samples]
        )

    def nominal(self) -> "Dataset":
        return Dataset([s for s in self.samples if s.label == 0])

    def anomalous(self) -> "Dataset":
        return Dataset([s for s in self.samples if s.label == 1])


def _image_from_file(path: Path) -> np.ndarray:
    raw = pnm.read(path)
    if raw.ndim == 2:
        raw = raw[:, :, None]
    return raw.transpose(2, 0, 1).astype(np.float32) / 255.0


def load_dataset(root: Union[str, Path]) -> Dataset:
    """Read a dataset directory; images are scaled to [0, 1]."""
    root = Path(root)
    index = root / INDEX_NAME
    try:
        with index.open(newline="") as fh:
            reader = csv.DictReader(fh)
            rows = list(reader)
            header = reader.fieldnames
    except OSError as exc:
        raise LoadError(f"cannot read {index}: {exc.strerror or exc}") from exc
    if header and not {"file", "label"} <= set(header):
        raise LoadError(f"{index}: header must contain 'file' and 'label', got {header}")
    samples: List[Sample] = []
    shape = None
    for lineno, row in enumerate(rows, 2):
        entry = f"{index}:{lineno} ({row.get('file')})"
        if None in row or row.get("file") in (None, ""):
            raise LoadError(f"{entry}: malformed row")
        try:
            label = int(row["label"])
        except (TypeError, ValueError):
            raise LoadError(f"{entry}: label {row['label']!r} is not 0 or 1") from None
        if label not in (0, 1):
            raise LoadError(f"{entry}: label {label} is not 0 or 1")
        try:
            image = _image_from_file(root / row["file"])
        except LoadError as exc:
            raise LoadError(f"{entry}: {exc}") from exc
        if shape is None:
            shape = image.shape
        elif image.shape != shape:
            raise LoadError(f"{entry}: image shape {image.shape} differs from {shape}")
        mask = None
        mask_file = (row.get("mask_file") or "").strip()
        if mask_file:
            try:
                raw = pnm.read(root / mask_file)
            except LoadError as exc:
                raise LoadError(f"{entry}: {exc}") from exc
            if raw.ndim != 2 or raw.shape != image.shape[1:]:
                raise LoadError(f"{entry}: mask {mask_file} has shape {raw.shape}, expected {image.shape[1:]}")
            mask = raw > 127
        try:
            samples.append(Sample(image, label, mask))
        except ConfigurationError as exc:
            raise LoadError(f"{entry}: {exc}") from exc
    return Dataset(samples)


def save_dataset(dataset: Dataset, root: Union[str, Path], prefix: str = "img") -> Path:
    """Write images, masks and ``index.csv`` under ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, sample in enumerate(dataset):
        c = sample.image.shape[0]
        if c not in (1, 3):
            raise ConfigurationError(f"only 1- or 3-channel images can be saved, got {c}")
        ext = "pgm" if c == 1 else "ppm"
        name = f"{prefix}_{i:05d}.{ext}"
        pixels = pnm.to_uint8(sample.image.transpose(1, 2, 0))
        pnm.write(root / name, pixels[:, :, 0] if c == 1 else pixels)
        mask_name = ""
        if sample.gt_map is not None:
            mask_name = f"{prefix}_{i:05d}_mask.pgm"
            pnm.write(root / mask_name, np.where(sample.gt_map, 255, 0).astype(np.uint8))
        rows.append((name, sample.label, mask_name))
    with (root / INDEX_NAME).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(INDEX_COLUMNS)
        writer.writerows(rows)
    return root
