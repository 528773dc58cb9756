"""Numpy-backed tensors with a reverse-mode tape."""
from . import ops
from .gradcheck import check_gradients
from .ops import (
    add, argmax, broadcast_shape, conv2d, depthwise_conv1d_causal, div, elementwise, exp,
    getitem, heaviside, linear, log, log_softmax, matmul, max, mean, minimum, mul, neg,
    reduce, reshape, sigmoid, softplus, stack, std, sub, sum, take_tokens, transpose,
)
from .tensor import Tape, Tensor, as_tensor

__all__ = [
    "Tape", "Tensor", "as_tensor", "check_gradients", "ops",
    "add", "argmax", "broadcast_shape", "conv2d", "depthwise_conv1d_causal", "div",
    "elementwise", "exp", "getitem", "heaviside", "linear", "log", "log_softmax", "matmul",
    "max", "mean", "minimum", "mul", "neg", "reduce", "reshape", "sigmoid", "softplus",
    "stack", "std", "sub", "sum", "take_tokens", "transpose",
]
