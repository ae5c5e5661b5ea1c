"""Command-line interface: ``fcdd train|eval|heatmap|rf-info|synth``.

Commands other than ``rf-info`` read a flat ``key = value`` file (``#``
starts a comment) and accept ``--set key=value`` overrides. Unknown keys are
rejected before any work starts. ``FCDD_SEED`` overrides the ``seed`` key.

Exit codes: 0 success, 2 configuration or usage error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import struct
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .data import (
    AugmentPolicy,
    ConfettiConfig,
    Dataset,
    Sample,
    ScenarioConfig,
    load_dataset,
    save_dataset,
    synth_scenario,
)
from .data import pnm
from .errors import ConfigurationError, FCDDError, LoadError, NumericError, UsageError
from .estimator import FCDD
from .evaluation import (
    balanced_reference,
    normalize_heatmaps,
    pixel_auc,
    render,
    roc_auc,
    write_report,
    write_scores_csv,
)
from .model import PRESET_SIGMA, ArchitectureSpec, parse_layers, preset, receptive_field
from .numerics import checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
SEED_ENV = "FCDD_SEED"
REF_MODES = ("self", "batch", "balanced")


# value parsing ----------------------------------------------------------------

def _bool(raw: str) -> bool:
    value = raw.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def _int_tuple(raw: str) -> tuple:
    return tuple(int(v) for v in raw.replace(",", " ").split())


def _optional_int(raw: str) -> Optional[int]:
    return None if raw.strip().lower() in ("", "none") else int(raw)


def _optional_float(raw: str) -> Optional[float]:
    return None if raw.strip().lower() in ("", "none") else float(raw)


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], object]
    default: object = None
    required: bool = False
    path: str = ""  # "dir" or "file" when the value must exist


TRAIN_KEYS: Dict[str, Key] = {
    "data": Key(str, required=True, path="dir"),
    "oe_data": Key(str, path="dir"),
    "out": Key(str, required=True),
    "resume": Key(str, path="file"),
    "architecture": Key(str, "cifar32"),
    "first_kernel": Key(_optional_int),
    "width_scale": Key(float, 1.0),
    "loss": Key(str, "fcdd"),
    "epochs": Key(int, 20),
    "batch_size": Key(int, 32),
    "optimizer": Key(str, "sgd_nesterov"),
    "lr": Key(float, 0.01),
    "momentum": Key(float, 0.9),
    "weight_decay": Key(float, 1e-6),
    "schedule": Key(str, "exponential"),
    "gamma": Key(float, 0.98),
    "milestones": Key(_int_tuple, ()),
    "anomaly_source": Key(str, "confetti"),
    "oe_prob": Key(float, 0.5),
    "confetti_k_min": Key(int, 1),
    "confetti_k_max": Key(int, 4),
    "confetti_s_min": Key(int, 2),
    "confetti_s_max": Key(int, 8),
    "confetti_color_mode": Key(str, "random"),
    "augment_jitter": Key(float, 0.0),
    "augment_crop": Key(_optional_int),
    "augment_pad": Key(int, 0),
    "augment_flip": Key(float, 0.0),
    "augment_noise_std": Key(float, 0.0),
    "normalize": Key(_bool, True),
    "sigma": Key(_optional_float),
    "labeled_repeat": Key(int, 1),
    "threshold_quantile": Key(float, 0.95),
    "checkpoint_every": Key(int, 0),
    "seed": Key(int, 0),
    "dtype": Key(str, "float32"),
}

EVAL_KEYS: Dict[str, Key] = {
    "checkpoint": Key(str, required=True, path="file"),
    "data": Key(str, required=True, path="dir"),
    "out": Key(str, required=True),
    "per_sample": Key(_bool, False),
    "sigma": Key(_optional_float),
}

HEATMAP_KEYS: Dict[str, Key] = {
    "checkpoint": Key(str, required=True, path="file"),
    "inputs": Key(str, required=True, path="any"),
    "out": Key(str, required=True),
    "eta": Key(float, 0.97),
    "sigma": Key(_optional_float),
    "ref": Key(str, "self"),
    "seed": Key(int, 0),
}

SYNTH_KEYS: Dict[str, Key] = {
    "scenario": Key(str, "texture"),
    "out": Key(str, required=True),
    "image_size": Key(int, 64),
    "n_train": Key(int, 400),
    "n_test_nominal": Key(int, 100),
    "n_test_anomalous": Key(int, 100),
    "n_train_anomalous": Key(int, 0),
    "seed": Key(int, 0),
    "stripe_period": Key(float, None),
    "orientation_jitter": Key(float, None),
    "noise_amplitude": Key(float, None),
    "pixel_noise": Key(float, None),
    "defect_k_min": Key(int, None),
    "defect_k_max": Key(int, None),
    "defect_s_min": Key(int, None),
    "defect_s_max": Key(int, None),
    "defect_color_mode": Key(str, None),
    "defect_shift_min": Key(float, None),
    "defect_shift_max": Key(float, None),
    "correlation": Key(float, 1.0),
    "test_watermark": Key(_bool, True),
}


# configuration ----------------------------------------------------------------

def read_config_text(text: str, origin: str = "<config>") -> Dict[str, str]:
    """Parse ``key = value`` lines; duplicate keys are an error."""
    raw: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{origin}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigurationError(f"{origin}:{lineno}: empty key")
        if key in raw:
            raise ConfigurationError(f"{origin}:{lineno}: duplicate key {key!r}")
        raw[key] = value
    return raw


def resolve_config(
    schema: Dict[str, Key],
    config_path: Optional[str],
    overrides: Sequence[str],
    env: Optional[Dict[str, str]] = None,
) -> Dict[str, object]:
    """Merge file, ``--set`` overrides and ``FCDD_SEED`` into typed values."""
    env = os.environ if env is None else env
    raw: Dict[str, str] = {}
    if config_path is not None:
        path = Path(config_path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc.strerror or exc}") from exc
        raw.update(read_config_text(text, str(path)))
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        raw[key] = value
    if "seed" in schema and env.get(SEED_ENV, "").strip():
        raw["seed"] = env[SEED_ENV].strip()

    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigurationError(f"unknown config key(s): {', '.join(unknown)}")
    values: Dict[str, object] = {}
    for key, spec in schema.items():
        if key not in raw:
            if spec.required:
                raise ConfigurationError(f"missing required key {key!r}")
            values[key] = spec.default
            continue
        try:
            value = spec.parse(raw[key])
        except ValueError as exc:
            raise ConfigurationError(f"invalid value for {key!r}: {exc}") from None
        if spec.path and value is not None:
            _check_path(key, str(value), spec.path)
        values[key] = value
    return values


def _check_path(key: str, value: str, kind: str) -> None:
    path = Path(value)
    ok = {"dir": path.is_dir, "file": path.is_file, "any": path.exists}[kind]()
    if not ok:
        what = {"dir": "directory", "file": "file", "any": "path"}[kind]
        raise ConfigurationError(f"{key}: {what} {value!r} does not exist")


# commands -----------------------------------------------------------------------

def _sigma(value: Optional[float], est: FCDD) -> float:
    return est._sigma() if value is None else float(value)


def cmd_train(cfg: Dict[str, object]) -> int:
    data = load_dataset(cfg["data"])
    if len(data) == 0:
        raise ConfigurationError(f"data: {cfg['data']} holds no samples")
    oe_data = load_dataset(cfg["oe_data"]) if cfg["oe_data"] else None
    arch = cfg["architecture"]
    if arch not in PRESET_SIGMA and not Path(arch).is_file():
        raise ConfigurationError(f"architecture: {arch!r} is neither a preset nor an existing file")
    est = FCDD(
        architecture=arch,
        width_scale=cfg["width_scale"],
        first_kernel=cfg["first_kernel"],
        loss=cfg["loss"],
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        optimizer=cfg["optimizer"],
        lr=cfg["lr"],
        momentum=cfg["momentum"],
        weight_decay=cfg["weight_decay"],
        schedule=cfg["schedule"],
        gamma=cfg["gamma"],
        milestones=cfg["milestones"],
        anomaly_source=cfg["anomaly_source"],
        oe_prob=cfg["oe_prob"],
        confetti=ConfettiConfig(
            cfg["confetti_k_min"], cfg["confetti_k_max"], cfg["confetti_s_min"], cfg["confetti_s_max"],
            cfg["confetti_color_mode"],
        ),
        augment=AugmentPolicy(
            cfg["augment_jitter"], cfg["augment_crop"], cfg["augment_pad"], cfg["augment_flip"],
            cfg["augment_noise_std"],
        ),
        normalize=cfg["normalize"],
        sigma=cfg["sigma"],
        labeled_repeat=cfg["labeled_repeat"],
        threshold_quantile=cfg["threshold_quantile"],
        seed=cfg["seed"],
        dtype=cfg["dtype"],
        checkpoint_every=cfg["checkpoint_every"],
    )
    out = Path(cfg["out"])
    est.fit_dataset(data, oe_data, out_dir=out, resume_from=cfg["resume"])
    ckpt = out / "model.ckpt"
    # keep optimizer state and epoch so the final checkpoint stays resumable
    state = {k: v for k, v in checkpoint.load(ckpt).items() if k.startswith("opt/") or k == "meta/epoch"}
    est.save(ckpt, state)
    print(f"checkpoint={ckpt}")
    print(f"final_loss={est.log_.losses[-1]:.6f}" if est.log_.losses else "final_loss=nan")
    return EXIT_OK


def cmd_eval(cfg: Dict[str, object]) -> int:
    est = FCDD.load(cfg["checkpoint"])
    data = load_dataset(cfg["data"])
    labels = data.labels()
    if len(data) == 0 or labels.min() == labels.max():
        raise UsageError(f"data: {cfg['data']} must contain both nominal (0) and anomalous (1) samples")
    X = data.images()
    scores = est.decision_function(X)
    metrics: Dict[str, object] = {"sample_auc": roc_auc(scores, labels)}
    masked = all(s.gt_map is not None for s in data.anomalous())
    if masked:
        maps = est.heatmaps(X, _sigma(cfg["sigma"], est))
        metrics["pixel_auc"] = pixel_auc(maps, data.gt_maps(), per_sample=cfg["per_sample"])
    metrics["n_nominal"] = int((labels == 0).sum())
    metrics["n_anomalous"] = int((labels == 1).sum())
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_report(out / "metrics.txt", metrics)
    write_scores_csv(out / "scores.csv", scores, labels)
    for key, value in metrics.items():
        print(f"{key}={value:.6f}" if isinstance(value, float) else f"{key}={value}")
    return EXIT_OK


def write_raw_heatmaps(path, maps: np.ndarray) -> None:
    """Little-endian dump: u32 h, u32 w, u32 count, then count*h*w float32 values."""
    maps = np.asarray(maps, dtype="<f4")
    count, h, w = maps.shape
    with Path(path).open("wb") as fh:
        fh.write(struct.pack("<3I", h, w, count))
        fh.write(np.ascontiguousarray(maps).tobytes())


def read_raw_heatmaps(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 12:
        raise LoadError(f"{path}: truncated header")
    h, w, count = struct.unpack("<3I", blob[:12])
    if len(blob) != 12 + 4 * h * w * count:
        raise LoadError(f"{path}: expected {count}x{h}x{w} values")
    return np.frombuffer(blob, dtype="<f4", offset=12).reshape(count, h, w).astype(np.float32)


def _heatmap_inputs(path: str) -> Dataset:
    p = Path(path)
    if p.is_dir():
        return load_dataset(p)
    raw = pnm.read(p)
    raw = raw[:, :, None] if raw.ndim == 2 else raw
    return Dataset([Sample(raw.transpose(2, 0, 1).astype(np.float32) / 255.0, 0)])


def cmd_heatmap(cfg: Dict[str, object]) -> int:
    if cfg["ref"] not in REF_MODES:
        raise ConfigurationError(f"ref must be one of {REF_MODES}, got {cfg['ref']!r}")
    if not 0.0 < cfg["eta"] <= 1.0:
        raise ConfigurationError(f"eta must lie in (0, 1], got {cfg['eta']}")
    est = FCDD.load(cfg["checkpoint"])
    data = _heatmap_inputs(cfg["inputs"])
    if len(data) == 0:
        raise UsageError(f"inputs: {cfg['inputs']} holds no images")
    maps = est.heatmaps(data.images(), _sigma(cfg["sigma"], est))
    eta = cfg["eta"]
    if cfg["ref"] == "self":
        normed = np.stack([normalize_heatmaps(m, eta, m) for m in maps])
    elif cfg["ref"] == "batch":
        normed = normalize_heatmaps(maps, eta, maps)
    else:
        normed = normalize_heatmaps(maps, eta, balanced_reference(maps, data.labels(), cfg["seed"]))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(normed):
        render(m, out / f"heatmap_{i:05d}.ppm")
    write_raw_heatmaps(out / "heatmaps.f32", maps)
    print(f"heatmaps={len(maps)} out={out}")
    return EXIT_OK


def cmd_rfinfo(architecture: str, input_shape: Optional[Sequence[int]]) -> int:
    if architecture in PRESET_SIGMA:
        layers, shape = preset(architecture).layers, preset(architecture).input_shape
    else:
        path = Path(architecture)
        text = path.read_text() if path.is_file() else architecture.replace(";", "\n")
        layers, shape = parse_layers(text)
    shape = tuple(input_shape) if input_shape is not None else shape
    rf = receptive_field(layers)
    if shape is None:
        # geometry alone: validate on an input exactly one receptive field wide
        first = next((layer.c_in for layer in layers if layer.kind == "conv"), 1)
        ArchitectureSpec(layers, (first, rf.rf_size, rf.rf_size))
    else:
        spec = ArchitectureSpec(layers, shape)
    print(f"rf_size={rf.rf_size} stride={rf.cumulative_stride} center_offset={rf.center_offset:g}")
    if shape is not None:
        u, v = spec.output_shape()
        c, h, w = shape
        print(f"input={c}x{h}x{w} output={u}x{v}")
    return EXIT_OK


def cmd_synth(cfg: Dict[str, object]) -> int:
    defect_keys = ("k_min", "k_max", "s_min", "s_max", "color_mode", "shift_min", "shift_max")
    base = ScenarioConfig()
    defects = {k: cfg[f"defect_{k}"] for k in defect_keys if cfg[f"defect_{k}"] is not None}
    texture = {
        k: cfg[k]
        for k in ("stripe_period", "orientation_jitter", "noise_amplitude", "pixel_noise")
        if cfg[k] is not None
    }
    if defects:
        current = {k: getattr(base.defects, k) for k in defect_keys}
        current.update(defects)
        texture["defects"] = ConfettiConfig(**current)
    scenario = ScenarioConfig(
        scenario=cfg["scenario"],
        image_size=cfg["image_size"],
        n_train=cfg["n_train"],
        n_test_nominal=cfg["n_test_nominal"],
        n_test_anomalous=cfg["n_test_anomalous"],
        n_train_anomalous=cfg["n_train_anomalous"],
        seed=cfg["seed"],
        correlation=cfg["correlation"],
        test_watermark=cfg["test_watermark"],
        **texture,
    )
    train, test = synth_scenario(scenario)
    out = Path(cfg["out"])
    save_dataset(train, out / "train", "train")
    save_dataset(test, out / "test", "test")
    print(f"train={out / 'train'} ({len(train)} images) test={out / 'test'} ({len(test)} images)")
    return EXIT_OK


# entry point --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fcdd", description="Fully convolutional anomaly detection.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("train", "train a model from a dataset directory"),
        ("eval", "report sample- and pixel-level AUC"),
        ("heatmap", "render normalized heatmaps and dump raw maps"),
        ("synth", "generate a synthetic benchmark"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", nargs="?", help="key = value configuration file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p = sub.add_parser("rf-info", help="print receptive-field geometry of an architecture")
    p.add_argument("architecture", help="preset name, architecture file, or ';'-separated layer lines")
    p.add_argument("--input", metavar="C,H,W", help="input shape for the output extent")
    return parser


SCHEMAS = {"train": TRAIN_KEYS, "eval": EVAL_KEYS, "heatmap": HEATMAP_KEYS, "synth": SYNTH_KEYS}
COMMANDS = {"train": cmd_train, "eval": cmd_eval, "heatmap": cmd_heatmap, "synth": cmd_synth}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "rf-info":
            shape = None
            if args.input:
                try:
                    shape = _int_tuple(args.input)
                except ValueError:
                    raise UsageError(f"--input expects C,H,W, got {args.input!r}") from None
                if len(shape) != 3:
                    raise UsageError(f"--input expects C,H,W, got {args.input!r}")
            return cmd_rfinfo(args.architecture, shape)
        cfg = resolve_config(SCHEMAS[args.command], args.config, args.overrides)
        return COMMANDS[args.command](cfg)
    except NumericError as exc:
        print(f"fcdd {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FCDDError, ValueError, OSError) as exc:
        print(f"fcdd {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
