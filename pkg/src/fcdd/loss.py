"""Hypersphere losses on network outputs.

Nominal samples (label 0) are pulled towards the center, which the network
carries as its final bias; anomalous samples (label 1) are pushed away through
``-log(1 - exp(-d))`` of their distance ``d``.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError, UsageError
from .numerics import Tensor

#: Lower clamp on the distance fed to ``-log(1 - exp(-d))``.
MIN_ANOMALY_DISTANCE = 1e-6
#: Largest value the anomalous term can take, reached at zero distance.
LOG_CAP = float(-np.log(-np.expm1(-MIN_ANOMALY_DISTANCE)))

LOSS_MODES = ("hsc", "fcdd", "fcdd_pixel")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _check_finite(t: Tensor, what: str) -> None:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite values in {what}")


def _labels(labels, n: int) -> np.ndarray:
    y = np.asarray(labels).reshape(-1)
    if n == 0 or y.size == 0:
        raise UsageError("empty batch")
    if y.size != n:
        raise UsageError(f"got {y.size} labels for a batch of {n}")
    if not np.all((y == 0) | (y == 1)):
        raise UsageError("labels must be 0 (nominal) or 1 (anomalous)")
    return y


def neg_log_one_minus_exp(d: Tensor) -> Tensor:
    """-log(1 - exp(-d)) for d > 0, evaluated without cancellation."""
    x = d.data
    out = -np.log(-np.expm1(-x))
    return Tensor._from_op(out, (d,), lambda g: (-g / np.expm1(x),), "neg_log1mexp")


def anomalous_term(distance: Tensor) -> Tensor:
    return neg_log_one_minus_exp(distance.clamp_min(MIN_ANOMALY_DISTANCE))


def _combine(distance: Tensor, y: np.ndarray) -> Tensor:
    """Batch mean of (1 - y) d - y log(1 - exp(-d))."""
    y = y.astype(distance.dtype).reshape(distance.shape)
    per_sample = distance * (1 - y) + anomalous_term(distance) * y
    return per_sample.mean()


def pseudo_huber(a) -> Tensor:
    """sqrt(||a||^2 + 1) - 1 over the last axis (a vector gives a scalar)."""
    a = _as_tensor(a)
    _check_finite(a, "pseudo_huber input")
    return (a.square().sum(axis=-1) + 1).sqrt() - 1


def heatmap(phi) -> Tensor:
    """Elementwise pseudo-Huber transform A = sqrt(phi^2 + 1) - 1 (all entries >= 0)."""
    phi = _as_tensor(phi)
    _check_finite(phi, "network output")
    return (phi.square() + 1).sqrt() - 1


def fcdd_loss(A: Tensor, labels) -> Tensor:
    """Mean FCDD objective over a batch of heatmaps of shape (b, 1, u, v)."""
    A = _as_tensor(A)
    if A.ndim != 4:
        raise UsageError(f"heatmaps must have shape (b, 1, u, v), got {A.shape}")
    y = _labels(labels, A.shape[0])
    _check_finite(A, "heatmap")
    uv = A.shape[2] * A.shape[3]
    distance = A.sum(axis=(1, 2, 3)) * (1.0 / uv)
    return _combine(distance, y)


def hsc_loss(phi: Tensor, labels) -> Tensor:
    """Mean hypersphere-classifier objective for outputs of shape (b, d)."""
    phi = _as_tensor(phi)
    if phi.ndim != 2:
        raise UsageError(f"HSC outputs must have shape (b, d), got {phi.shape}")
    y = _labels(labels, phi.shape[0])
    return _combine(pseudo_huber(phi), y)


def pixel_loss(A_full: Tensor, Y) -> Tensor:
    """Semi-supervised pixel-wise objective on full-resolution heatmaps.

    Pixels marked 1 in ``Y`` are pushed up, all others pulled down. Samples
    without any marked pixel contribute only the nominal part.
    """
    A_full = _as_tensor(A_full)
    Y = np.asarray(Y)
    if A_full.ndim == 4 and A_full.shape[1] == 1:
        A_full = A_full.reshape(A_full.shape[0], *A_full.shape[2:])
    if Y.ndim == 4 and Y.shape[1] == 1:
        Y = Y.reshape(Y.shape[0], *Y.shape[2:])
    if A_full.ndim != 3 or Y.shape != A_full.shape:
        raise UsageError(f"heatmap shape {A_full.shape} does not match ground truth {Y.shape}")
    if A_full.shape[0] == 0:
        raise UsageError("empty batch")
    if not np.all((Y == 0) | (Y == 1)):
        raise UsageError("ground-truth maps must be binary")
    _check_finite(A_full, "upsampled heatmap")
    m = Y.shape[1] * Y.shape[2]
    Y = Y.astype(A_full.dtype)
    nominal = (A_full * (1 - Y)).sum(axis=(1, 2)) * (1.0 / m)
    marked = (A_full * Y).sum(axis=(1, 2)) * (1.0 / m)
    has_anomaly = (Y.reshape(Y.shape[0], -1).max(axis=1) > 0).astype(A_full.dtype)
    per_sample = nominal + anomalous_term(marked) * has_anomaly
    return per_sample.mean()


def anomaly_score(A) -> np.ndarray:
    """Sum of heatmap entries per sample.

    Accepts a single map ``(1, u, v)`` / ``(u, v)`` (returns a float) or a
    batch ``(b, 1, u, v)`` (returns an array of length b).
    """
    arr = A.data if isinstance(A, Tensor) else np.asarray(A)
    if arr.ndim == 4:
        return arr.reshape(arr.shape[0], -1).sum(axis=1)
    return float(arr.sum())
