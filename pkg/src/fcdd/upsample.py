"""Full-resolution heatmaps from low-resolution network outputs.

Each low-resolution heatmap pixel spreads its value over its receptive field
with a Gaussian profile centered on the field's center. Because all fields
share one size and are spaced by the cumulative stride, this is a strided
transposed convolution with a fixed Gaussian kernel followed by a shift and
crop into image coordinates.
"""

from __future__ import annotations

import math
from typing import Optional, Tuple

import numpy as np

from .errors import ConfigurationError
from .model import RFInfo
from .numerics import Tensor, transposed_conv2d
from .numerics.functional import _windows


def gaussian_kernel(size: int, sigma: float, dtype=np.float64) -> np.ndarray:
    """Square Gaussian kernel normalized to sum to one."""
    if size < 1 or size % 2 == 0:
        raise ConfigurationError(f"Gaussian kernel size must be odd and positive, got {size}")
    if not sigma > 0:
        raise ConfigurationError(f"sigma must be positive, got {sigma}")
    c = (size - 1) / 2
    r = np.arange(size) - c
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2.0 * sigma**2))
    return (g / g.sum()).astype(dtype)


def kernel_size(rf: RFInfo) -> int:
    """Odd kernel size used for a receptive field (even sizes drop one pixel)."""
    return rf.rf_size if rf.rf_size % 2 else rf.rf_size - 1


def _anchor(rf: RFInfo) -> int:
    """Integer image coordinate of output pixel (0, 0)'s kernel center."""
    return math.floor(rf.center_offset)


def _check_geometry(uv: Tuple[int, int], rf: RFInfo, out_shape: Tuple[int, int]) -> None:
    s, half = rf.cumulative_stride, rf.rf_size / 2
    for n, size in zip(uv, out_shape):
        if size < 1:
            raise ConfigurationError(f"output shape must be positive, got {out_shape}")
        first = rf.center_offset
        last = rf.center_offset + (n - 1) * s
        if first < -half or last > size - 1 + half or size - 1 > last + half + s:
            raise ConfigurationError(
                f"a {uv[0]}x{uv[1]} heatmap with stride {s} and field {rf.rf_size} "
                f"cannot cover an image of {out_shape[0]}x{out_shape[1]}"
            )


def upsample(A, rf: RFInfo, sigma: float, out_shape: Tuple[int, int]):
    """Receptive-field upsampling of heatmaps ``(b, 1, u, v)`` to ``(b, 1, h, w)``.

    Returns a :class:`Tensor` (differentiable w.r.t. ``A``) when given one,
    otherwise a numpy array.
    """
    as_tensor = isinstance(A, Tensor)
    At = A if as_tensor else Tensor(np.asarray(A))
    if At.ndim != 4 or At.shape[1] != 1:
        raise ConfigurationError(f"heatmaps must have shape (b, 1, u, v), got {At.shape}")
    h, w = out_shape
    _check_geometry(At.shape[2:], rf, (h, w))
    k = kernel_size(rf)
    kernel = gaussian_kernel(k, sigma, At.dtype)
    full = transposed_conv2d(At, kernel, rf.cumulative_stride)
    offset = _anchor(rf) - (k - 1) // 2
    out = _shift_crop(full, offset, (h, w))
    return out if as_tensor else out.data


def _shift_crop(x: Tensor, offset: int, out_shape: Tuple[int, int]) -> Tensor:
    """out[..., y, x] = x[..., y - offset, x - offset], zero outside, size out_shape."""
    src_shape = x.shape
    spans = []
    for n, size in zip(src_shape[2:], out_shape):
        lo, hi = max(0, offset), min(size, n + offset)
        spans.append((lo, max(lo, hi)))
    (r0, r1), (c0, c1) = spans
    out = np.zeros(src_shape[:2] + tuple(out_shape), dtype=x.dtype)
    out[:, :, r0:r1, c0:c1] = x.data[:, :, r0 - offset : r1 - offset, c0 - offset : c1 - offset]

    def backward(g):
        gx = np.zeros(src_shape, dtype=g.dtype)
        gx[:, :, r0 - offset : r1 - offset, c0 - offset : c1 - offset] = g[:, :, r0:r1, c0:c1]
        return (gx,)

    return Tensor._from_op(out, (x,), backward, "shift_crop")


def upsample_loop(A: np.ndarray, rf: RFInfo, sigma: float, out_shape: Tuple[int, int]) -> np.ndarray:
    """Explicit per-pixel form of :func:`upsample`, kept as a cross-check.

    Every low-resolution pixel ``a`` adds ``a`` times a normalized Gaussian
    restricted to its receptive field and centered on the field's center.
    """
    A = np.asarray(A, dtype=np.float64)
    b, _, u, v = A.shape
    h, w = out_shape
    k = kernel_size(rf)
    half = (k - 1) // 2
    offsets = np.arange(-half, half + 1)
    bump = np.exp(-(offsets[:, None] ** 2 + offsets[None, :] ** 2) / (2.0 * sigma**2))
    bump /= bump.sum()
    out = np.zeros((b, 1, h, w))
    for n in range(b):
        for i in range(u):
            ci = _anchor(rf) + i * rf.cumulative_stride
            for j in range(v):
                cj = _anchor(rf) + j * rf.cumulative_stride
                a = A[n, 0, i, j]
                for di in offsets:
                    y = ci + di
                    if not 0 <= y < h:
                        continue
                    for dj in offsets:
                        x = cj + dj
                        if 0 <= x < w:
                            out[n, 0, y, x] += a * bump[di + half, dj + half]
    return out


def blur(heatmaps, sigma: float, size: Optional[int] = None) -> np.ndarray:
    """Stride-1 Gaussian smoothing with reflected borders.

    Works on any array whose last two axes are spatial. The kernel size
    defaults to ``2 * ceil(3 * sigma) + 1``.
    """
    arr = np.asarray(heatmaps, dtype=np.float64)
    if size is None:
        size = 2 * math.ceil(3 * sigma) + 1
    kernel = gaussian_kernel(size, sigma)
    half = size // 2
    lead = arr.shape[:-2]
    flat = arr.reshape((-1, 1) + arr.shape[-2:])
    padded = np.pad(flat, ((0, 0), (0, 0), (half, half), (half, half)), mode="symmetric")
    out = np.einsum("bcuvij,ij->bcuv", _windows(padded, size, 1), kernel)
    return out.reshape(lead + arr.shape[-2:])
