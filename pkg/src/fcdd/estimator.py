"""scikit-learn compatible FCDD estimator."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from sklearn.base import BaseEstimator, OutlierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .data import AugmentPolicy, ConfettiConfig, Dataset, Sample, channel_stats, normalize
from .errors import ConfigurationError
from .evaluation import gradient_heatmap, normalize_heatmaps, pixel_auc, roc_auc
from .loss import anomaly_score, heatmap
from .model import (
    PRESET_SIGMA,
    ArchitectureSpec,
    build,
    load_architecture,
    load_model,
    preset,
    save_model,
)
from .numerics import Tensor
from .train import OptimizerConfig, TrainConfig, TrainLog, train
from .upsample import upsample


def check_images(X, n_channels: Optional[int] = None) -> np.ndarray:
    """Validate an image batch ``(n, c, h, w)``; a single ``(c, h, w)`` image is promoted."""
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=(np.float32, np.float64))
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ValueError(f"expected images of shape (n, c, h, w), got {X.shape}")
    if n_channels is not None and X.shape[1] != n_channels:
        raise ValueError(f"expected {n_channels} channels, got {X.shape[1]}")
    return X


class FCDD(OutlierMixin, BaseEstimator):
    """Fully convolutional one-class anomaly detector with spatial explanations.

    ``fit`` trains on nominal images (``y == 0``) plus optional labeled
    anomalies (``y == 1``, optionally with ``masks``). Training anomalies come
    from ``oe`` images or from confetti noise, see ``anomaly_source``.
    ``decision_function`` returns the anomaly score (sum of the heatmap), and
    ``heatmaps`` the full-resolution explanation maps.

    Parameters mirror :class:`~fcdd.train.TrainConfig` and
    :class:`~fcdd.train.OptimizerConfig`. ``architecture`` is a preset name,
    an :class:`~fcdd.model.ArchitectureSpec` or a path to an architecture
    file; its input shape is replaced by the shape of the training images.
    """

    def __init__(
        self,
        architecture="cifar32",
        width_scale: float = 1.0,
        first_kernel: Optional[int] = None,
        loss: str = "fcdd",
        epochs: int = 20,
        batch_size: int = 32,
        optimizer: str = "sgd_nesterov",
        lr: float = 0.01,
        momentum: float = 0.9,
        weight_decay: float = 1e-6,
        schedule: str = "exponential",
        gamma: float = 0.98,
        milestones: Tuple[int, ...] = (),
        anomaly_source: str = "confetti",
        oe_prob: float = 0.5,
        confetti: Optional[ConfettiConfig] = None,
        augment: Optional[AugmentPolicy] = None,
        normalize: bool = True,
        sigma: Optional[float] = None,
        labeled_repeat: int = 1,
        threshold_quantile: float = 0.95,
        seed: int = 0,
        dtype: str = "float32",
        checkpoint_every: int = 0,
    ):
        self.architecture = architecture
        self.width_scale = width_scale
        self.first_kernel = first_kernel
        self.loss = loss
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.schedule = schedule
        self.gamma = gamma
        self.milestones = milestones
        self.anomaly_source = anomaly_source
        self.oe_prob = oe_prob
        self.confetti = confetti
        self.augment = augment
        self.normalize = normalize
        self.sigma = sigma
        self.labeled_repeat = labeled_repeat
        self.threshold_quantile = threshold_quantile
        self.seed = seed
        self.dtype = dtype
        self.checkpoint_every = checkpoint_every

    # configuration ------------------------------------------------------
    def _spec(self, input_shape) -> ArchitectureSpec:
        arch = self.architecture
        if isinstance(arch, ArchitectureSpec):
            return arch.with_input(input_shape)
        if isinstance(arch, str) and arch in PRESET_SIGMA:
            return preset(arch, self.first_kernel, self.width_scale).with_input(input_shape)
        if isinstance(arch, (str, Path)) and Path(arch).exists():
            return load_architecture(arch, input_shape)
        raise ConfigurationError(f"unknown architecture {arch!r}")

    def _sigma(self) -> float:
        if self.sigma is not None:
            return float(self.sigma)
        if isinstance(self.architecture, str) and self.architecture in PRESET_SIGMA:
            return PRESET_SIGMA[self.architecture]
        return 1.2

    def _configs(self) -> Tuple[TrainConfig, OptimizerConfig]:
        policy = self.augment or AugmentPolicy()
        if self.normalize:
            policy = AugmentPolicy(policy.jitter, policy.crop, policy.pad, policy.flip,
                                   policy.noise_std, self.norm_mean_, self.norm_std_)
        train_cfg = TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            loss=self.loss,
            oe_prob=self.oe_prob,
            anomaly_source=self.anomaly_source,
            confetti=self.confetti or ConfettiConfig(),
            augment=policy,
            sigma=self._sigma(),
            labeled_repeat=self.labeled_repeat,
            seed=self.seed,
            checkpoint_every=self.checkpoint_every,
        )
        opt_cfg = OptimizerConfig(
            family=self.optimizer,
            lr=self.lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            schedule=self.schedule,
            gamma=self.gamma,
            milestones=tuple(self.milestones),
        )
        return train_cfg, opt_cfg

    # fitting ------------------------------------------------------------
    def fit(self, X, y=None, masks=None, oe=None, out_dir=None):
        """Train on images ``X`` with labels ``y`` (default: all nominal)."""
        X = check_images(X)
        y = np.zeros(len(X), dtype=int) if y is None else np.asarray(y).astype(int).reshape(-1)
        if y.shape != (len(X),) or not np.all((y == 0) | (y == 1)):
            raise ValueError("y must hold one binary label per image")
        if masks is not None:
            masks = np.asarray(masks).astype(bool)
            if masks.shape != (len(X),) + X.shape[2:]:
                raise ValueError(f"masks must have shape {(len(X),) + X.shape[2:]}, got {masks.shape}")
        samples = [
            Sample(X[i], int(y[i]), None if masks is None or y[i] == 0 else masks[i]) for i in range(len(X))
        ]
        oe_data = None
        if oe is not None:
            oe = check_images(oe, X.shape[1])
            oe_data = Dataset([Sample(img, 1) for img in oe])
        return self.fit_dataset(Dataset(samples), oe_data, out_dir)

    def fit_dataset(self, data: Dataset, oe_data: Optional[Dataset] = None, out_dir=None, resume_from=None):
        """Train on a :class:`~fcdd.data.Dataset`; anomalies may carry masks individually.

        ``out_dir`` receives checkpoints and the training log; ``resume_from``
        continues from a checkpoint written by an earlier run.
        """
        if len(data) == 0:
            raise ValueError("training set is empty")
        if self.normalize:
            self.norm_mean_, self.norm_std_ = channel_stats(data)
        else:
            self.norm_mean_ = self.norm_std_ = None
        train_cfg, opt_cfg = self._configs()
        spec = self._spec(data.image_shape)
        self.model_ = build(spec, self.seed, np.dtype(self.dtype))
        self.model_, self.log_ = train(
            self.model_, data, oe_data, train_cfg, opt_cfg,
            out_dir=out_dir, resume_from=resume_from, extra_tensors=self._meta(),
        )
        nominal = data.nominal()
        nominal_scores = self.decision_function(nominal.images()) if len(nominal) else np.zeros(1)
        self.threshold_ = float(np.quantile(nominal_scores, self.threshold_quantile))
        self.n_features_in_ = int(np.prod(data.image_shape))
        return self

    def _meta(self):
        meta = {"meta/sigma": np.array([self._sigma()])}
        if self.norm_mean_ is not None:
            meta["meta/norm_mean"] = np.asarray(self.norm_mean_, dtype=np.float64)
            meta["meta/norm_std"] = np.asarray(self.norm_std_, dtype=np.float64)
        return meta

    # inference ----------------------------------------------------------
    def _prepare(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X, self.model_.spec.input_shape[0])
        if self.norm_mean_ is not None:
            X = normalize(X, self.norm_mean_, self.norm_std_)
        return X.astype(self.model_.dtype, copy=False)

    def _forward(self, X, batch_size: int = 64) -> np.ndarray:
        out = []
        for lo in range(0, len(X), batch_size):
            phi = self.model_.forward(Tensor(X[lo : lo + batch_size]), "eval")
            out.append(heatmap(phi).data)
        return np.concatenate(out) if out else np.zeros((0, 1, 1, 1))

    def transform(self, X) -> np.ndarray:
        """Low-resolution heatmaps ``(n, u, v)``."""
        return self._forward(self._prepare(X))[:, 0]

    def decision_function(self, X) -> np.ndarray:
        """Anomaly scores; larger means more anomalous."""
        return anomaly_score(self._forward(self._prepare(X))).astype(np.float64)

    def score_samples(self, X) -> np.ndarray:
        """Negated anomaly scores (larger means more normal), as in scikit-learn."""
        return -self.decision_function(X)

    def predict(self, X) -> np.ndarray:
        """1 for anomalies (score above the fitted threshold), 0 otherwise."""
        return (self.decision_function(X) > self.threshold_).astype(int)

    def heatmaps(self, X, sigma: Optional[float] = None) -> np.ndarray:
        """Full-resolution heatmaps ``(n, h, w)`` via receptive-field upsampling."""
        Xp = self._prepare(X)
        A = self._forward(Xp)
        return upsample(A.astype(np.float64), self.model_.rf, sigma or self._sigma(), Xp.shape[2:])[:, 0]

    def gradient_heatmaps(self, X, blur_sigma: Optional[float] = None) -> np.ndarray:
        """Input-gradient baseline explanations ``(n, h, w)``."""
        return gradient_heatmap(self.model_, self._prepare(X), blur_sigma or self._sigma())

    def normalized_heatmaps(self, X, eta: float = 0.97, ref="self") -> np.ndarray:
        maps = self.heatmaps(X)
        if ref == "self":
            return np.stack([normalize_heatmaps(m, eta, m) for m in maps])
        return normalize_heatmaps(maps, eta, maps if ref == "batch" else ref)

    def evaluate(self, X, y, masks=None, per_sample: bool = False) -> dict:
        """Sample-level AUC and, if masks are given, pixel-level AUC."""
        out = {"sample_auc": roc_auc(self.decision_function(X), y)}
        if masks is not None:
            out["pixel_auc"] = pixel_auc(self.heatmaps(X), masks, per_sample=per_sample)
        return out

    # persistence --------------------------------------------------------
    def save(self, path, extra=None) -> None:
        """Write model, normalization, sigma and threshold (plus ``extra`` tensors)."""
        check_is_fitted(self, "model_")
        extra = {**(extra or {}), **self._meta()}
        extra["meta/threshold"] = np.array([self.threshold_])
        save_model(self.model_, path, extra)

    @classmethod
    def load(cls, path) -> "FCDD":
        model, tensors = load_model(path)
        sigma = float(tensors.get("meta/sigma", np.array([1.2]))[0])
        est = cls(architecture=model.spec, sigma=sigma, normalize="meta/norm_mean" in tensors,
                  dtype=str(model.dtype))
        est.model_ = model
        est.norm_mean_ = tuple(tensors["meta/norm_mean"]) if "meta/norm_mean" in tensors else None
        est.norm_std_ = tuple(tensors["meta/norm_std"]) if "meta/norm_std" in tensors else None
        est.threshold_ = float(tensors.get("meta/threshold", np.array([np.inf]))[0])
        est.log_ = TrainLog()
        est.n_features_in_ = int(np.prod(model.spec.input_shape))
        return est

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.input_tags.three_d_array = True
        return tags
