from .tensor import Tensor, stack, check_finite
from .functional import (
    conv2d,
    transposed_conv2d,
    maxpool2d,
    batchnorm2d,
    leaky_relu,
    relu,
    output_extent,
)
from . import checkpoint

__all__ = [
    "Tensor",
    "stack",
    "check_finite",
    "conv2d",
    "transposed_conv2d",
    "maxpool2d",
    "batchnorm2d",
    "leaky_relu",
    "relu",
    "output_extent",
    "checkpoint",
]
