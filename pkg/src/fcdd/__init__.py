"""Fully convolutional anomaly detection with receptive-field heatmaps."""

from .errors import ConfigurationError, FCDDError, LoadError, NumericError, UsageError
from .estimator import FCDD
from .loss import anomaly_score, fcdd_loss, heatmap, hsc_loss, pixel_loss
from .model import ArchitectureSpec, FCNModel, RFInfo, build, parse_architecture, preset, receptive_field
from .upsample import upsample

__version__ = "0.1.0"

__all__ = [
    "FCDD",
    "ArchitectureSpec",
    "FCNModel",
    "RFInfo",
    "build",
    "parse_architecture",
    "preset",
    "receptive_field",
    "heatmap",
    "anomaly_score",
    "fcdd_loss",
    "hsc_loss",
    "pixel_loss",
    "upsample",
    "FCDDError",
    "ConfigurationError",
    "UsageError",
    "NumericError",
    "LoadError",
]
