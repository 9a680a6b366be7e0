"""Minimal reverse-mode automatic differentiation over dense numpy arrays."""
from . import functional
from .functional import ShapeError
from .nn import BatchNorm2d, Conv2d, DepthwiseConv2d, Linear, Module, SeparableConv, parameter
from .tensor import AutodiffError, Tape, Tensor, active_tape, backward, no_record, record

__all__ = [
    "AutodiffError",
    "BatchNorm2d",
    "Conv2d",
    "DepthwiseConv2d",
    "Linear",
    "Module",
    "ShapeError",
    "Tape",
    "Tensor",
    "active_tape",
    "backward",
    "functional",
    "no_record",
    "SeparableConv",
    "parameter",
    "record",
]
