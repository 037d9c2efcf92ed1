"""Minimal reverse-mode automatic differentiation on numpy arrays."""

from eitphys.autodiff import ops
from eitphys.autodiff.gradcheck import gradcheck, numerical_grad, relative_error
from eitphys.autodiff.ops import (
    abs,
    add,
    as_tensor,
    batch_norm,
    concat,
    conv2d,
    conv_output_size,
    flip,
    l1_loss,
    linear,
    lstm_sequence,
    lstm_step,
    mean,
    mul,
    neg,
    relu,
    reshape,
    sub,
    sum,
)
from eitphys.autodiff.tensor import (
    Node,
    Tape,
    Tensor,
    backward,
    default_tape,
    get_default_dtype,
    is_grad_enabled,
    no_grad,
    precision,
    set_default_dtype,
)

__all__ = [
    "Node", "Tape", "Tensor", "abs", "add", "as_tensor", "backward", "batch_norm", "concat", "conv2d",
    "conv_output_size", "default_tape", "flip", "get_default_dtype", "gradcheck", "is_grad_enabled",
    "l1_loss", "linear", "lstm_sequence", "lstm_step", "mean", "mul", "neg", "no_grad", "numerical_grad",
    "ops", "precision", "relative_error", "relu", "reshape", "set_default_dtype", "sub", "sum",
]
