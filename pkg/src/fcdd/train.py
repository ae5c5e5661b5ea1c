"""Optimizers, learning-rate schedules and the training loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .data import AugmentPolicy, ConfettiConfig, Dataset, Sample, augment_pair, inject_confetti, oe_mix, sample_rng
from .errors import ConfigurationError, NumericError, UsageError
from .loss import LOSS_MODES, fcdd_loss, heatmap, hsc_loss, pixel_loss
from .model import FCNModel, model_from_tensors, save_model
from .numerics import Tensor, checkpoint
from .upsample import upsample

logger = logging.getLogger(__name__)

OPTIMIZERS = ("sgd_nesterov", "adam")
SCHEDULES = ("exponential", "milestones")
ANOMALY_SOURCES = ("oe", "confetti", "none")


@dataclass(frozen=True)
class OptimizerConfig:
    family: str = "sgd_nesterov"
    lr: float = 0.01
    momentum: float = 0.9
    betas: Tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-6
    decoupled_decay: bool = True
    schedule: str = "exponential"
    gamma: float = 0.98
    milestones: Tuple[int, ...] = ()

    def __post_init__(self):
        if self.family not in OPTIMIZERS:
            raise ConfigurationError(f"optimizer must be one of {OPTIMIZERS}, got {self.family!r}")
        if self.schedule not in SCHEDULES:
            raise ConfigurationError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if not self.lr > 0:
            raise ConfigurationError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigurationError("betas must be two values in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigurationError("weight decay must be non-negative")
        if self.gamma <= 0:
            raise ConfigurationError("schedule factor must be positive")


@dataclass(frozen=True)
class TrainConfig:
    """Loop settings.

    ``anomaly_source`` picks how nominal samples are turned into training
    anomalies with probability ``oe_prob``: drawn from an auxiliary set
    (``"oe"``), confetti noise (``"confetti"``) or not at all. Labeled
    anomalies already in the training set are repeated ``labeled_repeat``
    times per epoch.
    """

    epochs: int = 10
    batch_size: int = 32
    loss: str = "fcdd"
    oe_prob: float = 0.5
    anomaly_source: str = "oe"
    confetti: ConfettiConfig = field(default_factory=lambda: ConfettiConfig(1, 4, 2, 8, "random"))
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    sigma: float = 1.2
    labeled_repeat: int = 1
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch size must be >= 1")
        if self.loss not in LOSS_MODES:
            raise ConfigurationError(f"loss must be one of {LOSS_MODES}, got {self.loss!r}")
        if self.anomaly_source not in ANOMALY_SOURCES:
            raise ConfigurationError(f"anomaly_source must be one of {ANOMALY_SOURCES}")
        if not 0 <= self.oe_prob <= 1:
            raise ConfigurationError("oe_prob must lie in [0, 1]")
        if self.sigma <= 0:
            raise ConfigurationError("sigma must be positive")
        if self.labeled_repeat < 1:
            raise ConfigurationError("labeled_repeat must be >= 1")
        if self.checkpoint_every < 0:
            raise ConfigurationError("checkpoint_every must be >= 0")


# optimizers -----------------------------------------------------------------

def _check_shapes(params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
    if len(params) != len(grads):
        raise UsageError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise UsageError(f"gradient shape {g.shape} does not match parameter {p.shape}")


def sgd_nesterov_step(params, grads, state: Dict, lr: float, momentum: float, weight_decay: float = 0.0):
    """In-place SGD step with Nesterov momentum and L2 weight decay.

    v <- mu v + g + wd theta;  theta <- theta - lr (g + wd theta + mu v)
    """
    _check_shapes(params, grads)
    velocity = state.setdefault("v", [np.zeros_like(p) for p in params])
    for p, g, v in zip(params, grads, velocity):
        d = g + weight_decay * p if weight_decay else g
        v *= momentum
        v += d
        p -= lr * (d + momentum * v)
    return params


def adam_step(params, grads, state: Dict, lr: float, betas=(0.9, 0.999), weight_decay: float = 0.0,
              eps: float = 1e-8, decoupled: bool = True):
    """In-place bias-corrected Adam step.

    With ``decoupled`` the decay shrinks parameters directly
    (theta <- theta - lr wd theta) before the adaptive step; otherwise it is
    added to the gradient.
    """
    _check_shapes(params, grads)
    b1, b2 = betas
    m = state.setdefault("m", [np.zeros_like(p) for p in params])
    v = state.setdefault("v2", [np.zeros_like(p) for p in params])
    state["t"] = t = state.get("t", 0) + 1
    c1, c2 = 1 - b1**t, 1 - b2**t
    for p, g, mi, vi in zip(params, grads, m, v):
        if weight_decay:
            if decoupled:
                p -= lr * weight_decay * p
            else:
                g = g + weight_decay * p
        mi *= b1
        mi += (1 - b1) * g
        vi *= b2
        vi += (1 - b2) * g * g
        p -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)
    return params


def schedule_lr(epoch: int, config: OptimizerConfig) -> float:
    if epoch < 0:
        raise UsageError("epoch must be >= 0")
    if config.schedule == "exponential":
        return config.lr * config.gamma**epoch
    passed = sum(1 for m in config.milestones if m <= epoch)
    return config.lr * 10.0 ** (-passed)


class Optimizer:
    """Binds an :class:`OptimizerConfig` to a model's parameters."""

    def __init__(self, model: FCNModel, config: OptimizerConfig):
        self.model = model
        self.config = config
        self.names = list(model.params)
        self.state: Dict = {}

    def step(self, lr: float) -> None:
        params = [self.model.params[n].data for n in self.names]
        grads = [self.model.params[n].grad for n in self.names]
        cfg = self.config
        if cfg.family == "sgd_nesterov":
            sgd_nesterov_step(params, grads, self.state, lr, cfg.momentum, cfg.weight_decay)
        else:
            adam_step(params, grads, self.state, lr, cfg.betas, cfg.weight_decay, decoupled=cfg.decoupled_decay)

    def state_tensors(self) -> Dict[str, np.ndarray]:
        out = {}
        for key in ("v", "m", "v2"):
            for name, arr in zip(self.names, self.state.get(key, [])):
                out[f"opt/{key}/{name}"] = arr
        if "t" in self.state:
            out["opt/t"] = np.array([self.state["t"]], dtype=np.float64)
        return out

    def load_state_tensors(self, tensors: Dict[str, np.ndarray]) -> None:
        for key in ("v", "m", "v2"):
            if f"opt/{key}/{self.names[0]}" in tensors:
                self.state[key] = [tensors[f"opt/{key}/{n}"].astype(self.model.params[n].dtype).copy()
                                   for n in self.names]
        if "opt/t" in tensors:
            self.state["t"] = int(tensors["opt/t"][0])


# training loop --------------------------------------------------------------

@dataclass
class TrainLog:
    records: List[Tuple[int, float, float]] = field(default_factory=list)

    def append(self, epoch: int, loss: float, lr: float) -> None:
        self.records.append((epoch, loss, lr))

    @property
    def losses(self) -> List[float]:
        return [r[1] for r in self.records]

    def to_csv(self, path: Union[str, Path]) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "loss", "lr"])
            for epoch, loss, lr in self.records:
                writer.writerow([epoch, repr(loss), repr(lr)])

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "TrainLog":
        with Path(path).open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([(int(r["epoch"]), float(r["loss"]), float(r["lr"])) for r in rows])


def batch_loss(model: FCNModel, images: np.ndarray, labels: np.ndarray, masks: Optional[np.ndarray],
               mode: str, sigma: float = 1.2, phase: str = "train") -> Tensor:
    """Forward a batch and evaluate the objective for ``mode``."""
    phi = model.forward(Tensor(images, dtype=model.dtype), phase)
    if mode == "hsc":
        return hsc_loss(phi.reshape(phi.shape[0], -1), labels)
    A = heatmap(phi)
    if mode == "fcdd":
        return fcdd_loss(A, labels)
    if masks is None:
        raise UsageError("pixel-wise loss needs ground-truth maps")
    A_full = upsample(A, model.rf, sigma, images.shape[2:])
    return pixel_loss(A_full, masks)


def _prepare_batch(batch: List[Sample], oe_data, cfg: TrainConfig, epoch: int, positions: Sequence[int]):
    images, labels, masks = [], [], []
    for sample, pos in zip(batch, positions):
        rng = sample_rng(cfg.seed, 1, epoch, pos)
        if cfg.oe_prob > 0 and sample.label == 0:
            if cfg.anomaly_source == "oe":
                sample = oe_mix([sample], oe_data, cfg.oe_prob, rng)[0]
            elif cfg.anomaly_source == "confetti":
                sample = inject_confetti([sample], cfg.confetti, cfg.oe_prob, rng)[0]
        mask = sample.gt_map
        if mask is None and cfg.loss == "fcdd_pixel":
            mask = np.full(sample.image.shape[1:], sample.label == 1)
        image, mask = augment_pair(sample.image, mask, cfg.augment, rng)
        images.append(image)
        labels.append(sample.label)
        masks.append(mask)
    x = np.stack(images)
    y = np.array(labels)
    m = np.stack(masks).astype(np.float64) if cfg.loss == "fcdd_pixel" else None
    return x, y, m


def _epoch_order(n_items: int, cfg: TrainConfig, epoch: int) -> np.ndarray:
    return sample_rng(cfg.seed, 0, epoch).permutation(n_items)


def train(
    model: FCNModel,
    data: Dataset,
    oe_data: Optional[Dataset] = None,
    config: TrainConfig = TrainConfig(),
    opt_config: OptimizerConfig = OptimizerConfig(),
    out_dir: Optional[Union[str, Path]] = None,
    resume_from: Optional[Union[str, Path]] = None,
    extra_tensors: Optional[Dict[str, np.ndarray]] = None,
) -> Tuple[FCNModel, TrainLog]:
    """Train ``model`` in place.

    ``data`` holds the nominal training samples and, for semi-supervised
    runs, labeled anomalies with masks. One epoch visits every nominal
    sample once (plus labeled anomalies ``labeled_repeat`` times); a fraction
    ``oe_prob`` of the nominal visits is swapped for an anomaly.
    """
    cfg = config
    oe_data = oe_data if oe_data is not None else Dataset()
    if cfg.anomaly_source == "oe" and cfg.oe_prob > 0 and len(oe_data) == 0:
        raise ConfigurationError("outlier exposure needs a non-empty auxiliary dataset (or oe_prob=0)")
    items = [s for s in data if s.label == 0]
    items += [s for s in data if s.label == 1] * cfg.labeled_repeat
    if cfg.epochs > 0 and not items:
        raise ConfigurationError("training set is empty")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    opt = Optimizer(model, opt_config)
    log = TrainLog()
    start = 0
    if resume_from is not None:
        tensors = checkpoint.load(resume_from)
        model.load_state_dict(model_from_tensors(tensors).state_dict())
        opt.load_state_tensors(tensors)
        start = int(tensors.get("meta/epoch", np.zeros(1))[0])
        log_path = Path(resume_from).with_suffix(".log.csv")
        if log_path.exists():
            log = TrainLog.from_csv(log_path)

    def snapshot(path: Path, epoch: int) -> None:
        extra = dict(extra_tensors or {})
        extra.update(opt.state_tensors())
        extra["meta/epoch"] = np.array([epoch], dtype=np.float64)
        save_model(model, path, extra)
        log.to_csv(path.with_suffix(".log.csv"))

    bs = cfg.batch_size
    for epoch in range(start, cfg.epochs):
        lr = schedule_lr(epoch, opt_config)
        order = _epoch_order(len(items), cfg, epoch)
        total, count = 0.0, 0
        for lo in range(0, len(order), bs):
            positions = order[lo : lo + bs]
            if len(positions) < 2 and len(order) >= 2:
                continue  # batchnorm needs two samples; drop a trailing singleton
            batch = [items[i] for i in positions]
            x, y, m = _prepare_batch(batch, oe_data, cfg, epoch, positions)
            model.zero_grad()
            try:
                loss = batch_loss(model, x, y, m, cfg.loss, cfg.sigma, "train")
            except NumericError:
                loss = None
            if loss is None or not np.isfinite(loss.item()):
                if out_dir is not None:
                    snapshot(out_dir / "diverged.ckpt", epoch)
                raise NumericError(f"training diverged in epoch {epoch}")
            loss.backward()
            grads_ok = all(np.all(np.isfinite(p.grad)) for p in model.parameters())
            if not grads_ok:
                if out_dir is not None:
                    snapshot(out_dir / "diverged.ckpt", epoch)
                raise NumericError(f"non-finite gradient in epoch {epoch}")
            opt.step(lr)
            total += loss.item() * len(positions)
            count += len(positions)
        mean_loss = total / max(count, 1)
        log.append(epoch, mean_loss, lr)
        logger.info("epoch %d loss %.6f lr %.3g", epoch, mean_loss, lr)
        if out_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            snapshot(out_dir / f"epoch_{epoch + 1:04d}.ckpt", epoch + 1)
    if out_dir is not None:
        snapshot(out_dir / "model.ckpt", max(cfg.epochs, start))
        log.to_csv(out_dir / "train_log.csv")
    return model, log
