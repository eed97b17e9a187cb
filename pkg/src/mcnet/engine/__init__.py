"""Numpy tensors with reverse-mode differentiation, Adam, and a gradient checker."""

from mcnet.engine.gradcheck import GradCheckReport, grad_check, relative_error
from mcnet.engine.ops import (
    BatchNormState,
    add,
    batch_norm,
    bce_loss,
    bilinear_matrix,
    cce_loss,
    concat_channels,
    conv2d,
    max_pool2d,
    one_hot,
    relu,
    same_padding,
    scale,
    sigmoid,
    softmax_channels,
    sum_all,
    upsample_bilinear,
)
from mcnet.engine.optim import AdamConfig, adam_step, zero_grad
from mcnet.engine.tensor import LayerParams, Tape, Tensor, backward, no_grad

__all__ = [
    "AdamConfig", "BatchNormState", "GradCheckReport", "LayerParams", "Tape", "Tensor",
    "adam_step", "add", "backward", "batch_norm", "bce_loss", "bilinear_matrix", "cce_loss",
    "concat_channels", "conv2d", "grad_check", "max_pool2d", "no_grad", "one_hot",
    "relative_error", "relu", "same_padding", "scale", "sigmoid", "softmax_channels",
    "sum_all", "upsample_bilinear", "zero_grad",
]
