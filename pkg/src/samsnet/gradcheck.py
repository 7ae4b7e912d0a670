"""Finite-difference gradient checking.

Analytic gradients from the tape are compared against central differences
computed at 64-bit precision.  ``loss_fn`` must be a zero-argument callable
that re-runs the forward pass from the current contents of the parameter
buffers and returns a scalar :class:`Tensor`.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor

__all__ = ["numerical_gradient", "check_gradients", "relative_errors"]


def numerical_gradient(loss_fn: Callable[[], Tensor], param: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central-difference d(loss)/d(param), one element at a time."""
    if param.dtype != np.float64:
        raise ValueError("numerical_gradient requires float64 parameters")
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = loss_fn().item()
        flat[i] = orig - step
        f_minus = loss_fn().item()
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|).

    When both values sit below ``floor`` they are indistinguishable from
    rounding noise (this genuinely happens: some parameters, like key-projection
    biases under softmax shift invariance, have exactly zero gradient) and
    compare as zero error.
    """
    denom = np.maximum(np.abs(analytic), np.abs(numeric))
    err = np.abs(analytic - numeric)
    return np.where(denom > floor, err / np.where(denom > floor, denom, 1.0), 0.0)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]],
    step: float = 1e-5,
) -> dict[str, np.ndarray]:
    """Relative errors between tape gradients and central differences.

    Returns a mapping from parameter name to the per-element relative error
    array.  Parameters must be float64 for the differences to be trustworthy.
    """
    for _, p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = {name: p.grad.copy() for name, p in params}

    errors: dict[str, np.ndarray] = {}
    for name, p in params:
        numeric = numerical_gradient(loss_fn, p, step=step)
        errors[name] = relative_errors(analytic[name], numeric)
    return errors
