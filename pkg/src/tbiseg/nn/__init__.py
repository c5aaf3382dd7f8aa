"""Minimal reverse-mode autodiff and CNN primitives."""
from .functional import (
    ShapeError,
    avg_pool,
    batch_norm,
    concat_channels,
    conv,
    conv_output_size,
    conv_transpose,
    conv_transpose_output_size,
    dense,
    global_avg_pool,
    instance_norm,
    leaky_relu,
    max_pool,
    relu,
    softmax_channels,
)
from .graph import CheckpointError, Graph, gradient_check, load_checkpoint, save_checkpoint
from .tensor import Node, Tensor, UsageError, backward, no_grad, tracing

__all__ = [
    "Tensor", "Node", "Graph", "UsageError", "ShapeError", "CheckpointError",
    "backward", "no_grad", "tracing", "gradient_check", "save_checkpoint", "load_checkpoint",
    "conv", "conv_transpose", "conv_output_size", "conv_transpose_output_size",
    "max_pool", "avg_pool", "global_avg_pool", "instance_norm", "batch_norm",
    "relu", "leaky_relu", "softmax_channels", "concat_channels", "dense",
]
