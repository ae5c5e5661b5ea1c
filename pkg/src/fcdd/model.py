"""Fully convolutional architectures, receptive-field geometry and forward pass.

An architecture is an ordered stack of four layer kinds: ``conv``,
``maxpool``, ``batchnorm`` and ``activation``. There is deliberately no dense
layer kind. The last layer must be a single-channel convolution whose bias
plays the role of the hypersphere center.

Architecture text files hold one layer per line::

    # comment
    conv in=3 out=32 k=3 s=1 p=1
    bn
    lrelu a=0.01
    maxpool k=2 s=2
    conv in=32 out=1 k=1
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigurationError, LoadError, UsageError
from .numerics import checkpoint
from .numerics import Tensor, batchnorm2d, conv2d, leaky_relu, maxpool2d, output_extent

LAYER_KINDS = ("conv", "maxpool", "batchnorm", "activation")
DEFAULT_ALPHA = 0.01


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    k: int = 1
    s: int = 1
    p: int = 0
    c_in: int = 0
    c_out: int = 0
    alpha: float = 0.0
    bias: bool = True

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigurationError(
                f"unknown layer kind {self.kind!r}; fully convolutional stacks allow only {LAYER_KINDS}"
            )
        if self.kind in ("conv", "maxpool"):
            if self.k < 1 or self.s < 1 or self.p < 0:
                raise ConfigurationError(f"{self.kind}: need k >= 1, s >= 1, p >= 0 (got {self})")
        elif (self.k, self.s, self.p) != (1, 1, 0):
            raise ConfigurationError(f"{self.kind} layers have k=s=1, p=0")
        if self.kind == "conv" and (self.c_in < 1 or self.c_out < 1):
            raise ConfigurationError("conv layers need positive in/out channel counts")
        if self.kind == "activation" and not 0.0 <= self.alpha < 1.0:
            raise ConfigurationError(f"activation slope must lie in [0, 1), got {self.alpha}")

    @property
    def spatial(self) -> bool:
        return self.kind in ("conv", "maxpool")

    def to_line(self) -> str:
        if self.kind == "conv":
            line = f"conv in={self.c_in} out={self.c_out} k={self.k} s={self.s} p={self.p}"
            return line if self.bias else line + " bias=0"
        if self.kind == "maxpool":
            line = f"maxpool k={self.k} s={self.s}"
            return line + f" p={self.p}" if self.p else line
        if self.kind == "batchnorm":
            return "bn"
        return f"lrelu a={self.alpha!r}" if self.alpha else "relu"


def conv(c_in: int, c_out: int, k: int = 3, s: int = 1, p: Optional[int] = None, bias: bool = True) -> LayerSpec:
    return LayerSpec("conv", k=k, s=s, p=k // 2 if p is None else p, c_in=c_in, c_out=c_out, bias=bias)


def maxpool(k: int = 2, s: Optional[int] = None, p: int = 0) -> LayerSpec:
    return LayerSpec("maxpool", k=k, s=k if s is None else s, p=p)


def bn() -> LayerSpec:
    return LayerSpec("batchnorm")


def lrelu(alpha: float = DEFAULT_ALPHA) -> LayerSpec:
    return LayerSpec("activation", alpha=alpha)


@dataclass(frozen=True)
class RFInfo:
    """Receptive field of one output pixel.

    ``center_offset`` is the input coordinate (row or column, both axes are
    identical) of the receptive-field center of output pixel ``(0, 0)``;
    output pixel ``i`` is centered at ``center_offset + i * cumulative_stride``.
    It may be a half-integer when pooling windows are even.
    """

    rf_size: int
    cumulative_stride: int
    center_offset: float

    @property
    def start_offset(self) -> float:
        """Input coordinate of the first pixel in output (0, 0)'s field."""
        return self.center_offset - (self.rf_size - 1) / 2


@dataclass(frozen=True)
class ArchitectureSpec:
    layers: Tuple[LayerSpec, ...]
    input_shape: Tuple[int, int, int]
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        self.validate()

    def validate(self) -> None:
        if not self.layers:
            raise ConfigurationError("architecture has no layers")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigurationError(f"input shape must be (c, h, w), got {self.input_shape}")
        channels = self.input_shape[0]
        for i, layer in enumerate(self.layers):
            if layer.kind == "conv":
                if layer.c_in != channels:
                    raise ConfigurationError(
                        f"layer {i}: conv expects {layer.c_in} input channels but receives {channels}"
                    )
                channels = layer.c_out
        last = self.layers[-1]
        if last.kind != "conv" or not last.bias:
            raise ConfigurationError("the final layer must be a convolution with a bias term")
        if last.c_out != 1:
            raise ConfigurationError(f"the final layer must output 1 channel, got {last.c_out}")
        self.output_shape()

    def output_shape(self, hw: Optional[Tuple[int, int]] = None) -> Tuple[int, int]:
        """Spatial extent (u, v) of the network output for an (h, w) input."""
        h, w = hw if hw is not None else self.input_shape[1:]
        for i, layer in enumerate(self.layers):
            if not layer.spatial:
                continue
            if layer.k > h + 2 * layer.p or layer.k > w + 2 * layer.p:
                raise ConfigurationError(f"layer {i} ({layer.kind}) shrinks the feature map below 1x1")
            h = output_extent(h, layer.k, layer.s, layer.p)
            w = output_extent(w, layer.k, layer.s, layer.p)
        return h, w

    def to_text(self) -> str:
        c, h, w = self.input_shape
        lines = [f"input c={c} h={h} w={w}"]
        lines += [layer.to_line() for layer in self.layers]
        return "\n".join(lines) + "\n"

    def with_input(self, input_shape: Sequence[int]) -> "ArchitectureSpec":
        return ArchitectureSpec(self.layers, tuple(input_shape), self.name)


def _parse_value(raw: str, key: str, lineno: int):
    if key == "bias" and raw.lower() in ("true", "false"):
        return int(raw.lower() == "true")
    try:
        return float(raw) if key == "a" else int(raw)
    except ValueError:
        raise ConfigurationError(f"line {lineno}: bad value {raw!r} for {key}") from None


def parse_layers(text: str) -> Tuple[Tuple[LayerSpec, ...], Optional[Tuple[int, int, int]]]:
    """Layers of the line-oriented architecture format and the shape of its ``input`` line, if any."""
    layers: List[LayerSpec] = []
    file_shape = None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        kind, *items = line.split()
        kv: Dict[str, float] = {}
        for item in items:
            if "=" not in item:
                raise ConfigurationError(f"line {lineno}: expected key=value, got {item!r}")
            key, raw = item.split("=", 1)
            kv[key] = _parse_value(raw, key, lineno)
        allowed = {
            "input": {"c", "h", "w"},
            "conv": {"in", "out", "k", "s", "p", "bias"},
            "maxpool": {"k", "s", "p"},
            "bn": set(),
            "batchnorm": set(),
            "lrelu": {"a"},
            "relu": set(),
        }
        if kind not in allowed:
            raise ConfigurationError(f"line {lineno}: unsupported layer {kind!r}")
        unknown = set(kv) - allowed[kind]
        if unknown:
            raise ConfigurationError(f"line {lineno}: unknown keys {sorted(unknown)} for {kind}")
        if kind == "input":
            file_shape = (kv.get("c", 1), kv.get("h", 0), kv.get("w", 0))
        elif kind == "conv":
            if "in" not in kv or "out" not in kv:
                raise ConfigurationError(f"line {lineno}: conv needs in= and out=")
            k = kv.get("k", 3)
            layers.append(conv(kv["in"], kv["out"], k, kv.get("s", 1), kv.get("p", 0), bool(kv.get("bias", 1))))
        elif kind == "maxpool":
            k = kv.get("k", 2)
            layers.append(maxpool(k, kv.get("s", k), kv.get("p", 0)))
        elif kind in ("bn", "batchnorm"):
            layers.append(bn())
        elif kind == "lrelu":
            layers.append(lrelu(kv.get("a", DEFAULT_ALPHA)))
        else:
            layers.append(LayerSpec("activation", alpha=0.0))
    return tuple(layers), file_shape


def parse_architecture(text: str, input_shape: Optional[Sequence[int]] = None) -> ArchitectureSpec:
    """Parse the line-oriented architecture format.

    An optional ``input c=.. h=.. w=..`` line fixes the input shape; otherwise
    ``input_shape`` must be given (it also overrides the file).
    """
    layers, file_shape = parse_layers(text)
    shape = tuple(input_shape) if input_shape is not None else file_shape
    if shape is None:
        raise ConfigurationError("architecture has no input line and no input shape was given")
    return ArchitectureSpec(layers, shape)


def load_architecture(path: Union[str, Path], input_shape: Optional[Sequence[int]] = None) -> ArchitectureSpec:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read architecture file {path}: {exc}") from exc
    return parse_architecture(text, input_shape)


def receptive_field(spec: Union[ArchitectureSpec, Sequence[LayerSpec]]) -> RFInfo:
    """Receptive-field size, cumulative stride and center of output pixel (0, 0)."""
    layers = spec.layers if isinstance(spec, ArchitectureSpec) else spec
    rf, stride, center = 1, 1, 0.0
    for layer in layers:
        if not layer.spatial:
            continue
        rf += (layer.k - 1) * stride
        center += ((layer.k - 1) / 2 - layer.p) * stride
        stride *= layer.s
    return RFInfo(rf, stride, center)


# presets --------------------------------------------------------------------

PRESET_SIGMA = {"fmnist28": 1.2, "cifar32": 1.2, "vgg224like": 12.0}


def _scaled(width: int, scale: float) -> int:
    return max(1, int(round(width * scale)))


def preset(name: str, first_kernel: Optional[int] = None, width_scale: float = 1.0) -> ArchitectureSpec:
    """Named architecture stacks.

    ``first_kernel`` replaces the first convolution's kernel size (padding
    ``k // 2`` keeps the output extent), which is how the receptive field is
    varied. ``width_scale`` multiplies every hidden channel count.
    """
    a = DEFAULT_ALPHA
    w = lambda n: _scaled(n, width_scale)  # noqa: E731
    if name == "fmnist28":
        k0 = first_kernel or 3
        layers = [
            conv(1, w(128), k0, bias=False), bn(), lrelu(a), maxpool(2),
            conv(w(128), w(128), 3, bias=False), bn(), lrelu(a), maxpool(2),
            conv(w(128), 1, 1),
        ]
        shape = (1, 28, 28)
    elif name == "cifar32":
        k0 = first_kernel or 3
        layers = [
            conv(3, w(128), k0, bias=False), bn(), lrelu(a), maxpool(2),
            conv(w(128), w(256), 3, bias=False), bn(), lrelu(a), maxpool(2),
            conv(w(256), w(256), 3, bias=False), bn(), lrelu(a),
            conv(w(256), 1, 1),
        ]
        shape = (3, 32, 32)
    elif name == "vgg224like":
        k0 = first_kernel or 3
        layers = [conv(3, w(64), k0, bias=False), bn(), lrelu(a), maxpool(2)]
        layers += [conv(w(64), w(128), 3, bias=False), bn(), lrelu(a), maxpool(2)]
        layers += [conv(w(128), w(256), 3, bias=False), bn(), lrelu(a)]
        layers += [conv(w(256), w(256), 3, bias=False), bn(), lrelu(a), maxpool(2)]
        layers += [conv(w(256), w(512), 3, bias=False), bn(), lrelu(a)]
        layers += [conv(w(512), w(512), 3, bias=False), bn(), lrelu(a)]
        layers += [conv(w(512), 1, 1)]
        shape = (3, 224, 224)
    else:
        raise UsageError(f"unknown preset {name!r}; choose from {sorted(PRESET_SIGMA)}")
    if k0 < 1 or k0 % 2 == 0:
        raise ConfigurationError(f"first kernel size must be odd and positive, got {k0}")
    return ArchitectureSpec(tuple(layers), shape, name)


# model ----------------------------------------------------------------------

@dataclass
class FCNModel:
    """Parameters and batchnorm state for an :class:`ArchitectureSpec`."""

    spec: ArchitectureSpec
    params: Dict[str, Tensor] = field(default_factory=dict)
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.params.values())).dtype

    @property
    def rf(self) -> RFInfo:
        return receptive_field(self.spec)

    @property
    def center_bias(self) -> Tensor:
        return self.params[f"{len(self.spec.layers) - 1}.bias"]

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def forward(self, batch, mode: str = "eval") -> Tensor:
        """Network output phi(X) of shape (b, 1, u, v)."""
        if mode not in ("train", "eval"):
            raise UsageError(f"mode must be 'train' or 'eval', got {mode!r}")
        x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch), dtype=self.dtype)
        if x.ndim != 4 or x.shape[1] != self.spec.input_shape[0]:
            raise UsageError(
                f"expected input (b, {self.spec.input_shape[0]}, h, w), got {x.shape}"
            )
        try:
            self.spec.output_shape(x.shape[2:])
        except ConfigurationError as exc:
            raise UsageError(f"input of spatial size {x.shape[2:]} is too small: {exc}") from None
        training = mode == "train"
        for i, layer in enumerate(self.spec.layers):
            if layer.kind == "conv":
                x = conv2d(x, self.params[f"{i}.weight"], self.params.get(f"{i}.bias"), layer.s, layer.p)
            elif layer.kind == "maxpool":
                x = maxpool2d(x, layer.k, layer.s, layer.p)
            elif layer.kind == "batchnorm":
                x = batchnorm2d(
                    x,
                    self.params[f"{i}.gamma"],
                    self.params[f"{i}.beta"],
                    self.buffers[f"{i}.running_mean"],
                    self.buffers[f"{i}.running_var"],
                    training,
                )
            else:
                x = leaky_relu(x, layer.alpha)
        return x

    __call__ = forward

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.params.items()}
        state.update({name: b.copy() for name, b in self.buffers.items()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        expected = set(self.params) | set(self.buffers)
        missing = expected - set(state)
        if missing:
            raise UsageError(f"state is missing entries {sorted(missing)}")
        for name, p in self.params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise UsageError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr.astype(p.dtype).copy()
            p.zero_grad()
        for name, b in self.buffers.items():
            arr = np.asarray(state[name])
            if arr.shape != b.shape:
                raise UsageError(f"shape mismatch for {name}: {arr.shape} vs {b.shape}")
            self.buffers[name] = arr.astype(np.float64).copy()


def build(spec: ArchitectureSpec, seed: int = 0, dtype=np.float32) -> FCNModel:
    """Initialize a model: fan-in scaled uniform weights, zero biases."""
    spec.validate()
    rng = np.random.default_rng(seed)
    params: Dict[str, Tensor] = {}
    buffers: Dict[str, np.ndarray] = {}
    channels = spec.input_shape[0]
    for i, layer in enumerate(spec.layers):
        if layer.kind == "conv":
            fan_in = layer.c_in * layer.k * layer.k
            alpha = _next_alpha(spec.layers, i)
            gain = math.sqrt(2.0 / (1.0 + alpha**2))
            bound = gain * math.sqrt(3.0 / fan_in)
            weight = rng.uniform(-bound, bound, size=(layer.c_out, layer.c_in, layer.k, layer.k))
            params[f"{i}.weight"] = Tensor(weight, requires_grad=True, dtype=dtype)
            if layer.bias:
                params[f"{i}.bias"] = Tensor(np.zeros(layer.c_out), requires_grad=True, dtype=dtype)
            channels = layer.c_out
        elif layer.kind == "batchnorm":
            params[f"{i}.gamma"] = Tensor(np.ones(channels), requires_grad=True, dtype=dtype)
            params[f"{i}.beta"] = Tensor(np.zeros(channels), requires_grad=True, dtype=dtype)
            buffers[f"{i}.running_mean"] = np.zeros(channels)
            buffers[f"{i}.running_var"] = np.ones(channels)
    return FCNModel(spec, params, buffers)


def _next_alpha(layers: Sequence[LayerSpec], i: int) -> float:
    for layer in layers[i + 1 :]:
        if layer.kind == "conv":
            break
        if layer.kind == "activation":
            return layer.alpha
    return 1.0


# persistence ----------------------------------------------------------------

ARCH_KEY = "meta/architecture"


def encode_text(text: str) -> np.ndarray:
    """UTF-8 bytes stored as float32 values (exact for 0..255)."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def decode_text(values: np.ndarray) -> str:
    return np.asarray(values).astype(np.uint8).tobytes().decode("utf-8")


def model_tensors(model: FCNModel, extra: Optional[Dict[str, np.ndarray]] = None) -> Dict[str, np.ndarray]:
    """Named arrays describing a model, ready for the checkpoint container."""
    tensors: Dict[str, np.ndarray] = {ARCH_KEY: encode_text(model.spec.to_text())}
    tensors.update({f"param/{k}": v for k, v in model.state_dict().items()})
    if extra:
        tensors.update(extra)
    return tensors


def model_from_tensors(tensors: Dict[str, np.ndarray]) -> FCNModel:
    if ARCH_KEY not in tensors:
        raise LoadError("checkpoint has no architecture entry")
    try:
        spec = parse_architecture(decode_text(tensors[ARCH_KEY]))
    except (UnicodeDecodeError, ConfigurationError) as exc:
        raise LoadError(f"checkpoint architecture is invalid: {exc}") from exc
    state = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    dtype = state.get(f"{len(spec.layers) - 1}.bias", np.zeros(1, np.float32)).dtype
    model = build(spec, 0, dtype)
    try:
        model.load_state_dict(state)
    except UsageError as exc:
        raise LoadError(f"checkpoint parameters do not match the architecture: {exc}") from exc
    return model


def save_model(model: FCNModel, path: Union[str, Path], extra: Optional[Dict[str, np.ndarray]] = None) -> None:
    checkpoint.save(path, model_tensors(model, extra))


def load_model(path: Union[str, Path]):
    """Return ``(model, tensors)`` where ``tensors`` holds every stored entry."""
    tensors = checkpoint.load(path)
    return model_from_tensors(tensors), tensors
