from .ops import (
    batchnorm2d,
    check_finite,
    concat_channels,
    conv2d,
    conv_backend,
    dropout,
    exp,
    log,
    maxpool2,
    record_patterns,
    relu,
    set_conv_backend,
    sigmoid,
    slice_channels,
    softplus,
    upsample2,
)
from .optim import Adam, AdamState, adam_step
from .serialize import WeightFormatError, dump_weights, load_weights_file, parse_weights, save_weights_file
from .tensor import NonFiniteError, ShapeError, Tensor, as_tensor, no_grad

__all__ = [
    "Adam",
    "AdamState",
    "NonFiniteError",
    "ShapeError",
    "Tensor",
    "WeightFormatError",
    "adam_step",
    "as_tensor",
    "batchnorm2d",
    "check_finite",
    "concat_channels",
    "conv2d",
    "conv_backend",
    "dropout",
    "dump_weights",
    "exp",
    "load_weights_file",
    "log",
    "maxpool2",
    "no_grad",
    "parse_weights",
    "record_patterns",
    "relu",
    "save_weights_file",
    "set_conv_backend",
    "sigmoid",
    "slice_channels",
    "softplus",
    "upsample2",
]
