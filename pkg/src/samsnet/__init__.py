"""Spectrogram-domain music source separation with sliced multi-head attention."""

from .tensor import (
    NonFiniteError,
    Tape,
    Tensor,
    add,
    backward,
    concat,
    conv2d,
    depthwise_conv2d,
    layer_norm,
    matmul_batched,
    mul,
    narrow,
    relu,
    scale,
    set_backward_perturbation,
    set_finite_guard,
    sigmoid,
    softmax_rows,
    sub,
    transpose_conv2d,
    tsum,
)
from .optim import Adam, AdamState
from .gradcheck import check_gradients, numerical_gradient, relative_errors

__version__ = "0.1.0"
