"""Differentiable layer primitives for fully convolutional networks.

All spatial ops take ``(batch, channel, height, width)`` arrays and support
zero padding only.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigurationError
from .tensor import Tensor, check_finite

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def output_extent(size: int, k: int, stride: int, padding: int = 0) -> int:
    return (size + 2 * padding - k) // stride + 1


def _windows(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """View of shape (b, c, h', w', k, k) over the last two axes of ``x``."""
    return sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def _check_4d(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ConfigurationError(f"{what} expects a (b, c, h, w) input, got shape {x.shape}")


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation with zero padding."""
    _check_4d(x, "conv2d")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ConfigurationError(f"conv2d weight must be (o, c, k, k), got {weight.shape}")
    b, c, h, w = x.shape
    o, wc, k, _ = weight.shape
    if wc != c:
        raise ConfigurationError(f"conv2d: input has {c} channels, weight expects {wc}")
    if stride < 1 or padding < 0:
        raise ConfigurationError("conv2d: stride must be >= 1 and padding >= 0")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ConfigurationError(
            f"conv2d: kernel {k} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    if bias is not None and bias.shape != (o,):
        raise ConfigurationError(f"conv2d bias must have shape ({o},), got {bias.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = _windows(xp, k, stride)
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)
    wmat = weight.data.reshape(o, c * k * k)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(b, ho, wo, o).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    check_finite(out, "conv2d")

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(b * ho * wo, o)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (gmat.T @ cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = gmat.sum(axis=0)
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(b, ho, wo, c, k, k)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward, "conv2d")


def transposed_conv2d(x: Tensor, kernel: np.ndarray, stride: int) -> Tensor:
    """Strided transposed convolution of single-channel maps with a fixed kernel.

    Every input pixel adds ``value * kernel`` to the output window that starts
    at ``stride`` times its coordinates; overlapping windows sum. The kernel
    is a constant, gradients flow to ``x`` only.
    """
    _check_4d(x, "transposed_conv2d")
    kernel = np.asarray(kernel)
    if kernel.ndim != 2 or kernel.shape[0] != kernel.shape[1] or kernel.shape[0] < 1:
        raise ConfigurationError(f"transposed_conv2d needs a square kernel, got {kernel.shape}")
    if stride < 1:
        raise ConfigurationError("transposed_conv2d: stride must be >= 1")
    k = kernel.shape[0]
    b, c, u, v = x.shape
    kernel = kernel.astype(x.dtype, copy=False)
    out = np.zeros((b, c, (u - 1) * stride + k, (v - 1) * stride + k), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * u : stride, j : j + stride * v : stride] += kernel[i, j] * x.data

    def backward(g):
        win = _windows(g, k, stride)
        return (np.einsum("bcuvij,ij->bcuv", win, kernel),)

    return Tensor._from_op(out, (x,), backward, "transposed_conv2d")


def maxpool2d(x: Tensor, k: int, stride: Optional[int] = None, padding: int = 0) -> Tensor:
    """Max pooling; ties route the gradient to the first maximum in scan order."""
    _check_4d(x, "maxpool2d")
    stride = k if stride is None else stride
    if k < 1 or stride < 1:
        raise ConfigurationError("maxpool2d: kernel and stride must be >= 1")
    b, c, h, w = x.shape
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ConfigurationError(f"maxpool2d: window {k} larger than input {h}x{w}")
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=-np.inf)
    win = _windows(xp, k, stride)
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(b, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                hit = arg == i * k + j
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g * hit
        if padding:
            gxp = gxp[:, :, padding : padding + h, padding : padding + w]
        return (gxp,)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), backward, "maxpool2d")


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics normalize the input and the running
    estimates are updated in place (unbiased variance, as is customary).
    """
    _check_4d(x, "batchnorm2d")
    b, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ConfigurationError(f"batchnorm2d: affine parameters must have shape ({c},)")
    shape = (1, c, 1, 1)
    if training:
        if b < 2:
            raise ConfigurationError("batchnorm2d needs a batch of at least 2 samples in train mode")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        n = b * h * w
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * n / max(n - 1, 1)
    else:
        mean, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean.reshape(shape)) * inv_std.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def backward(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma.data.reshape(shape)
        if training:
            gx = (inv_std.reshape(shape) / (b * h * w)) * (
                b * h * w * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = gxhat * inv_std.reshape(shape)
        return gx, gg, gb

    return Tensor._from_op(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "batchnorm2d")


def leaky_relu(x: Tensor, alpha: float = 0.0) -> Tensor:
    """max(x, alpha * x); the subgradient at zero is ``alpha``."""
    if not 0.0 <= alpha < 1.0:
        raise ConfigurationError(f"activation slope must lie in [0, 1), got {alpha}")
    a = x.data
    pos = a > 0
    slope = np.where(pos, 1.0, alpha).astype(a.dtype)
    return Tensor._from_op(a * slope, (x,), lambda g: (g * slope,), "leaky_relu")


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)
