"""Detection and localization metrics, heatmap normalization and rendering."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence, Union

import numpy as np
from scipy.stats import rankdata

from .errors import LoadError, NumericError, UsageError
from .data import pnm
from .numerics import Tensor
from .upsample import blur

NORMALIZATION_GUARD = 1e-12


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve as a Mann-Whitney statistic.

    Equals P(score_anomalous > score_nominal) + 0.5 * P(tie) over all
    anomalous/nominal pairs.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise UsageError(f"{scores.size} scores but {labels.size} labels")
    if not np.all((labels == 0) | (labels == 1)):
        raise UsageError("labels must be binary")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UsageError("AUC needs both nominal and anomalous samples")
    if not np.all(np.isfinite(scores)):
        raise NumericError("scores contain NaN or infinite values")
    ranks = rankdata(scores)  # average ranks for ties: halves are exact in float64
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pixel_auc(heatmaps, gt_maps, per_sample: bool = False) -> float:
    """Localization AUC of heatmap pixels against binary ground-truth masks.

    By default all pixels of all maps are pooled into one ROC. With
    ``per_sample=True`` the AUC is computed per map and averaged over the maps
    that contain both nominal and anomalous pixels.
    """
    maps = np.asarray(heatmaps, dtype=np.float64)
    gt = np.asarray(gt_maps)
    if maps.ndim == 4 and maps.shape[1] == 1:
        maps = maps[:, 0]
    if gt.ndim == 4 and gt.shape[1] == 1:
        gt = gt[:, 0]
    if maps.shape != gt.shape:
        raise UsageError(f"heatmap shape {maps.shape} does not match masks {gt.shape}")
    gt = gt.astype(bool)
    if not gt.any() or gt.all():
        raise UsageError("masks must contain both anomalous and nominal pixels")
    if not per_sample:
        return roc_auc(maps.reshape(-1), gt.reshape(-1))
    aucs = [
        roc_auc(m.reshape(-1), g.reshape(-1))
        for m, g in zip(maps, gt)
        if g.any() and not g.all()
    ]
    if not aucs:
        raise UsageError("no sample has both anomalous and nominal pixels")
    return float(np.mean(aucs))


def percentile(values, eta: float) -> float:
    """Linear-interpolation percentile at fraction ``eta`` (index ``(n - 1) * eta``)."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise UsageError("percentile of an empty set")
    if not 0.0 <= eta <= 1.0:
        raise UsageError(f"eta must lie in [0, 1], got {eta}")
    return float(np.quantile(values, eta, method="linear"))


def normalize_heatmaps(maps, eta: float = 0.97, ref=None) -> np.ndarray:
    """Contrast-normalize heatmaps into [0, 1] using reference-set quantiles.

    Each pixel becomes ``(a - min(ref)) / q_eta(ref - min(ref))``, clamped to
    [0, 1]. ``ref`` defaults to ``maps`` itself; pass a single map for
    self-normalization. A (near-)zero quantile yields all-zero output.
    """
    maps = np.asarray(maps, dtype=np.float64)
    ref = maps if ref is None else np.asarray(ref, dtype=np.float64)
    if ref.size == 0:
        raise UsageError("reference set is empty")
    if not 0.0 < eta <= 1.0:
        raise UsageError(f"eta must lie in (0, 1], got {eta}")
    low = ref.min()
    q = percentile(ref - low, eta)
    if q <= NORMALIZATION_GUARD:
        return np.zeros_like(maps)
    return np.clip((maps - low) / q, 0.0, 1.0)


def self_normalize(maps, eta: float = 0.97) -> np.ndarray:
    """Normalize every map of a batch against itself only."""
    maps = np.asarray(maps, dtype=np.float64)
    return np.stack([normalize_heatmaps(m, eta, m) for m in maps]) if len(maps) else maps


def balanced_reference(maps, labels, seed: int = 0) -> np.ndarray:
    """Subsample the larger class so nominal and anomalous maps are equally many."""
    maps = np.asarray(maps)
    labels = np.asarray(labels).reshape(-1)
    nom, anom = np.flatnonzero(labels == 0), np.flatnonzero(labels == 1)
    if len(nom) == 0 or len(anom) == 0:
        return maps
    rng = np.random.default_rng(seed)
    k = min(len(nom), len(anom))
    keep = np.concatenate([
        nom if len(nom) == k else np.sort(rng.choice(nom, k, replace=False)),
        anom if len(anom) == k else np.sort(rng.choice(anom, k, replace=False)),
    ])
    return maps[np.sort(keep)]


def gradient_heatmap(model, x, blur_sigma: Optional[float] = None) -> np.ndarray:
    """Input-gradient explanation of the anomaly score.

    Per pixel: the maximum over channels of ``|d score / d x|``, optionally
    blurred. Returns ``(b, h, w)``. Model parameter gradients are reset.
    """
    from .loss import heatmap as pseudo_huber_map

    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.ndim == 3:
        arr = arr[None]
    xt = Tensor(arr, requires_grad=True, dtype=model.dtype)
    A = pseudo_huber_map(model.forward(xt, "eval"))
    A.sum().backward()
    model.zero_grad()
    grad = xt.grad
    if not np.all(np.isfinite(grad)):
        raise NumericError("input gradient is not finite")
    saliency = np.abs(grad).max(axis=1).astype(np.float64)
    if blur_sigma:
        saliency = blur(saliency, blur_sigma)
    return saliency


# rendering ------------------------------------------------------------------

_CMAP_STOPS = np.array([0.0, 0.5, 1.0])
_CMAP_COLORS = np.array([[0, 0, 128], [255, 255, 255], [200, 0, 0]], dtype=np.float64)


def colorize(values) -> np.ndarray:
    """Map values in [0, 1] to uint8 RGB (navy, white, red piecewise-linear)."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    rgb = np.stack([np.interp(v, _CMAP_STOPS, _CMAP_COLORS[:, ch]) for ch in range(3)], axis=-1)
    return np.rint(rgb).astype(np.uint8)


def render(normalized_map, path: Union[str, Path]) -> Path:
    """Write a normalized ``(h, w)`` heatmap as a PPM image."""
    v = np.asarray(normalized_map, dtype=np.float64)
    if v.ndim == 3 and v.shape[0] == 1:
        v = v[0]
    if v.ndim != 2:
        raise UsageError(f"render expects a (h, w) map, got {v.shape}")
    if v.size and (v.min() < 0 or v.max() > 1):
        raise UsageError("render expects values in [0, 1]; normalize first")
    path = Path(path)
    try:
        pnm.write(path, colorize(v))
    except OSError as exc:
        raise LoadError(f"cannot write heatmap {path}: {exc.strerror or exc}") from exc
    return path


# reports --------------------------------------------------------------------

def write_report(path: Union[str, Path], metrics: Mapping[str, object]) -> None:
    lines = [f"{key}={_fmt(value)}" for key, value in metrics.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_report(path: Union[str, Path]) -> Dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def write_scores_csv(path: Union[str, Path], scores: Sequence[float], labels: Sequence[int], names: Optional[Sequence[str]] = None) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "file", "label", "score"])
        for i, (s, y) in enumerate(zip(scores, labels)):
            writer.writerow([i, names[i] if names else "", int(y), repr(float(s))])


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)
