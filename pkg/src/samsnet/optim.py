"""Adam optimizer with bias correction.

Update rule per parameter:

    m <- b1*m + (1-b1)*g        v <- b2*v + (1-b2)*g^2
    p <- p - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)

The state (m, v, t) can be exported/restored for checkpoint resume.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor

__all__ = ["Adam", "AdamState"]


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, m: list[np.ndarray], v: list[np.ndarray], t: int = 0):
        self.m = m
        self.v = v
        self.t = int(t)


class Adam:
    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if lr < 0:
            raise ValueError("lr must be non-negative")
        self.params = list(params)
        for p in self.params:
            if not p.requires_grad:
                raise ValueError("Adam requires parameters with requires_grad=True")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.state = AdamState(
            m=[np.zeros_like(p.data) for p in self.params],
            v=[np.zeros_like(p.data) for p in self.params],
        )

    def step(self) -> None:
        """Apply one Adam update from the accumulated ``.grad`` buffers."""
        st = self.state
        st.t += 1
        bc1 = 1.0 - self.beta1**st.t
        bc2 = 1.0 - self.beta2**st.t
        for p, m, v in zip(self.params, st.m, st.v):
            g = p.grad
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= self.lr * update

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def state_arrays(self) -> AdamState:
        return self.state

    def load_state(self, state: AdamState) -> None:
        if len(state.m) != len(self.params) or len(state.v) != len(self.params):
            raise ValueError("optimizer state does not match parameter count")
        for p, m, v in zip(self.params, state.m, state.v):
            if m.shape != p.data.shape or v.shape != p.data.shape:
                raise ValueError("optimizer state shape mismatch")
        self.state = AdamState(
            m=[m.astype(p.data.dtype, copy=True) for p, m in zip(self.params, state.m)],
            v=[v.astype(p.data.dtype, copy=True) for p, v in zip(self.params, state.v)],
            t=state.t,
        )
