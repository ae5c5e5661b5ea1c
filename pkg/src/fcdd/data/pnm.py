"""Minimal binary PGM (P5) / PPM (P6) codec for 8-bit images."""

from __future__ import annotations

from pathlib import Path
from typing import Union

import numpy as np

from ..errors import LoadError

PathLike = Union[str, Path]


def _tokens(blob: bytes, count: int, pos: int):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    out = []
    n = len(blob)
    while len(out) < count:
        while pos < n and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < n and blob[pos : pos + 1] == b"#":
            while pos < n and blob[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not blob[pos : pos + 1].isspace() and blob[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise LoadError("truncated PNM header")
        out.append(blob[start:pos])
    return out, pos


def decode(blob: bytes, name: str = "<bytes>") -> np.ndarray:
    """Decode to uint8 ``(h, w)`` for P5 or ``(h, w, 3)`` for P6."""
    magic = blob[:2]
    if magic not in (b"P5", b"P6"):
        raise LoadError(f"{name}: not a binary PGM/PPM file")
    try:
        (w, h, maxval), pos = _tokens(blob, 3, 2)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise LoadError(f"{name}: malformed PNM header") from None
    if maxval != 255:
        raise LoadError(f"{name}: only 8-bit images (maxval 255) are supported, got {maxval}")
    pos += 1  # single whitespace byte before the raster
    channels = 3 if magic == b"P6" else 1
    size = w * h * channels
    raster = blob[pos : pos + size]
    if len(raster) != size or len(blob) != pos + size:
        raise LoadError(
            f"{name}: raster has {len(blob) - pos} bytes, expected {size} for {w}x{h}x{channels}"
        )
    arr = np.frombuffer(raster, dtype=np.uint8)
    return arr.reshape((h, w, 3) if channels == 3 else (h, w)).copy()


def encode(image: np.ndarray) -> bytes:
    """Encode uint8 ``(h, w)`` as P5 or ``(h, w, 3)`` as P6."""
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {image.dtype}")
    if image.ndim == 2:
        magic = b"P5"
    elif image.ndim == 3 and image.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"expected (h, w) or (h, w, 3) image, got {image.shape}")
    h, w = image.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(image).tobytes()


def read(path: PathLike) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read image {path}: {exc.strerror or exc}") from exc
    return decode(blob, str(path))


def write(path: PathLike, image: np.ndarray) -> None:
    Path(path).write_bytes(encode(image))


def to_uint8(image: np.ndarray) -> np.ndarray:
    """[0, 1] floats to uint8 with rounding."""
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
