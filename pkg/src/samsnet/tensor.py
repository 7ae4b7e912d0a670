"""Dense tensors with tape-based reverse-mode automatic differentiation.

Values live in numpy buffers (float32 by default, float64 for gradient
checking).  Operations are pure functions over :class:`Tensor` inputs; when a
:class:`Tape` is active and an input is being tracked, the op records a
backward rule onto the tape.  ``Tape.backward`` walks the recorded entries in
reverse once, accumulating gradients into the ``grad`` buffers of tensors
created with ``requires_grad=True``.

Broadcasting is deliberately restricted: elementwise ops require equal shapes
(scalars go through :func:`scale`).  Every op checks its output for NaN/Inf
and aborts loudly; see :func:`set_finite_guard`.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "NonFiniteError",
    "set_finite_guard",
    "set_backward_perturbation",
    "backward",
    "add",
    "sub",
    "mul",
    "scale",
    "tsum",
    "relu",
    "sigmoid",
    "softmax_rows",
    "layer_norm",
    "matmul_batched",
    "conv2d",
    "depthwise_conv2d",
    "transpose_conv2d",
    "concat",
    "narrow",
]

_FLOAT_DTYPES = (np.float32, np.float64)


class NonFiniteError(FloatingPointError):
    """A forward or backward computation produced NaN or Inf."""


_guard_finite = True

# Test hook: per-op multiplicative perturbation of the upstream gradient,
# used by the negative-control gradcheck test.  Empty in normal operation.
_backward_perturbation: dict[str, float] = {}


def set_finite_guard(enabled: bool) -> bool:
    """Enable/disable NaN/Inf checking on op outputs.  Returns the old value."""
    global _guard_finite
    old = _guard_finite
    _guard_finite = bool(enabled)
    return old


def set_backward_perturbation(op_name: str | None, factor: float = 1.0) -> None:
    """Scale the upstream gradient of ``op_name`` by ``factor`` (test hook).

    Passing ``None`` clears all perturbations.
    """
    if op_name is None:
        _backward_perturbation.clear()
    else:
        _backward_perturbation[op_name] = float(factor)


def _check_finite(name: str, arr: np.ndarray) -> None:
    if _guard_finite and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by op '{name}'")


def _as_float_dtype(dtype) -> np.dtype:
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise TypeError(f"unsupported dtype {dt}; use float32 or float64")
    return dt


class Tensor:
    """A dense multi-dimensional float array, optionally tracking gradients.

    ``grad`` is allocated (zero-filled) iff ``requires_grad`` is set, and
    always has the same shape as ``data``.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(_as_float_dtype(dtype), copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        _check_finite("tensor", arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(_as_float_dtype(dtype)), requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"


class _Entry:
    __slots__ = ("name", "inputs", "output", "fn")

    def __init__(self, name, inputs, output, fn):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.fn = fn


_active = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_active, "stack", None)
    if stack is None:
        stack = []
        _active.stack = stack
    return stack


class Tape:
    """Ordered record of executed ops; inputs always precede their op.

    Use as a context manager around the forward computation, then call
    :meth:`backward` (or the module-level :func:`backward`) on a scalar loss.
    A tape can be traversed exactly once.
    """

    def __init__(self):
        self.entries: list[_Entry] = []
        self._tracked: set[int] = set()
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape context exited out of order")
        stack.pop()

    def __len__(self) -> int:
        return len(self.entries)

    def watches(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._tracked

    def _record(self, name: str, inputs: tuple[Tensor, ...], output: Tensor, fn) -> None:
        self.entries.append(_Entry(name, inputs, output, fn))
        self._tracked.add(id(output))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(tensor) into grads of requires_grad tensors."""
        if loss.data.size != 1:
            raise ValueError("backward requires a scalar loss")
        if not self.entries:
            raise ValueError("backward without any recorded operations")
        if id(loss) not in self._tracked:
            raise ValueError("loss was not produced on this tape")
        if self._consumed:
            raise RuntimeError("tape already traversed; record a fresh forward pass")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for entry in reversed(self.entries):
            g_out = grads.pop(id(entry.output), None)
            if g_out is None:
                continue
            factor = _backward_perturbation.get(entry.name)
            if factor is not None:
                g_out = g_out * factor
            input_grads = entry.fn(g_out)
            for inp, g in zip(entry.inputs, input_grads):
                if g is None:
                    continue
                _check_finite(f"{entry.name}.backward", g)
                if inp.requires_grad:
                    inp.grad += g
                elif id(inp) in self._tracked:
                    acc = grads.get(id(inp))
                    if acc is None:
                        # copy: backward fns may alias the same array across slots
                        grads[id(inp)] = np.array(g, copy=True)
                    else:
                        acc += g


def backward(loss: Tensor, tape: Tape) -> None:
    """Reverse-mode sweep over ``tape``; see :meth:`Tape.backward`."""
    tape.backward(loss)


def _current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _make(name: str, inputs: tuple[Tensor, ...], data: np.ndarray, fn) -> Tensor:
    _check_finite(name, data)
    out = Tensor(data)
    tape = _current_tape()
    if tape is not None and any(tape.watches(t) for t in inputs):
        tape._record(name, inputs, out, fn)
    return out


def _require_same_shape(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise and reduction ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)
    return _make("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("sub", a, b)
    return _make("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make("scale", (a,), a.data * c, lambda g: (g * c,))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Sum over ``axis`` (all elements when None)."""
    in_shape = a.shape
    if axis is None:
        axes = tuple(range(a.ndim))
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % a.ndim for ax in axes)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        gg = g
        if not keepdims:
            for ax in sorted(axes):
                gg = np.expand_dims(gg, ax)
        return (np.broadcast_to(gg, in_shape).copy(),)

    return _make("sum", (a,), out, fn)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make("relu", (a,), np.where(mask, a.data, a.data.dtype.type(0)), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def softmax_rows(a: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis; rows sum to 1."""
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    out = ex / ex.sum(axis=-1, keepdims=True)

    def fn(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _make("softmax_rows", (a,), out, fn)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, axes: Sequence[int], eps: float = 1e-5) -> Tensor:
    """Standardize ``a`` over ``axes`` then apply elementwise gain and bias.

    ``gain``/``bias`` must have shape ``tuple(a.shape[ax] for ax in axes)``;
    they broadcast over the remaining axes.
    """
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    axes = tuple(sorted(ax % a.ndim for ax in axes))
    if len(set(axes)) != len(axes):
        raise ValueError("layer_norm: duplicate axes")
    span = tuple(a.shape[ax] for ax in axes)
    n = int(np.prod(span)) if span else 0
    if n == 0:
        raise ValueError("layer_norm: zero-size normalization span")
    expected = span
    if gain.shape != expected or bias.shape != expected:
        raise ValueError(
            f"layer_norm: gain/bias shape {gain.shape}/{bias.shape} does not match normalized extents {expected}"
        )
    bshape = tuple(a.shape[i] if i in axes else 1 for i in range(a.ndim))
    gb = gain.data.reshape(bshape)
    bb = bias.data.reshape(bshape)

    x = a.data
    mu = x.mean(axis=axes, keepdims=True)
    d = x - mu
    var = np.mean(d * d, axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + a.dtype.type(eps))
    xhat = d * inv
    out = gb * xhat + bb

    def fn(g):
        g_gain = (g * xhat).sum(axis=tuple(i for i in range(a.ndim) if i not in axes)).reshape(expected)
        g_bias = g.sum(axis=tuple(i for i in range(a.ndim) if i not in axes)).reshape(expected)
        dxhat = g * gb
        dvar = (dxhat * d).sum(axis=axes, keepdims=True) * (-0.5) * inv**3
        dmu = -(dxhat.sum(axis=axes, keepdims=True)) * inv
        dx = dxhat * inv + dvar * (2.0 / n) * d + dmu / n
        return (dx.astype(a.dtype, copy=False), g_gain.astype(gain.dtype, copy=False), g_bias.astype(bias.dtype, copy=False))

    return _make("layer_norm", (a, gain, bias), out, fn)


# ---------------------------------------------------------------------------
# matrix and convolution ops
# ---------------------------------------------------------------------------

def matmul_batched(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    """Independent matrix product per leading batch index.

    ``a``: (B, m, n); ``b``: (B, n, p), or (B, p, n) with ``transpose_b``.
    """
    if a.ndim != 3 or b.ndim != 3:
        raise ValueError("matmul_batched expects rank-3 tensors")
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"matmul_batched: batch extents differ ({a.shape[0]} vs {b.shape[0]})")
    inner_b = b.shape[2] if transpose_b else b.shape[1]
    if a.shape[2] != inner_b:
        raise ValueError(f"matmul_batched: inner extents differ ({a.shape[2]} vs {inner_b})")
    ad, bd = a.data, b.data

    if transpose_b:
        out = np.matmul(ad, np.swapaxes(bd, 1, 2))

        def fn(g):
            return (np.matmul(g, bd), np.matmul(np.swapaxes(g, 1, 2), ad))
    else:
        out = np.matmul(ad, bd)

        def fn(g):
            return (np.matmul(g, np.swapaxes(bd, 1, 2)), np.matmul(np.swapaxes(ad, 1, 2), g))

    return _make("matmul_batched", (a, b), out, fn)


def _same_pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p)))


def _windows(xp: np.ndarray, k: int) -> np.ndarray:
    # (C, T+2p, F+2p) -> (C, T, F, k, k) strided view
    return np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))


def _check_kernel(name: str, k: int) -> int:
    if k < 1 or k % 2 == 0:
        raise ValueError(f"{name}: kernel size must be odd, got {k}")
    return (k - 1) // 2


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padded stride-1 cross-correlation over (T, F), summed over C_in.

    ``x``: (C_in, T, F); ``kernels``: (C_out, C_in, k, k); ``bias``: (C_out,).
    """
    if x.ndim != 3 or kernels.ndim != 4:
        raise ValueError("conv2d expects x (C,T,F) and kernels (C_out,C_in,k,k)")
    c_out, c_in, kh, kw = kernels.shape
    if kh != kw:
        raise ValueError("conv2d: square kernels only")
    if c_in != x.shape[0]:
        raise ValueError(f"conv2d: input has {x.shape[0]} channels, kernels expect {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    p = _check_kernel("conv2d", kh)

    xp = _same_pad(x.data, p)
    out = np.einsum("ctfij,ocij->otf", _windows(xp, kh), kernels.data, optimize=True)
    if bias is not None:
        out = out + bias.data[:, None, None]

    def fn(g):
        g_b = g.sum(axis=(1, 2)) if bias is not None else None
        g_k = np.einsum("ctfij,otf->ocij", _windows(xp, kh), g, optimize=True)
        gp = _same_pad(g, p)
        flipped = kernels.data[:, :, ::-1, ::-1]
        g_x = np.einsum("otfij,ocij->ctf", _windows(gp, kh), flipped, optimize=True)
        if bias is not None:
            return (g_x, g_k, g_b)
        return (g_x, g_k)

    inputs = (x, kernels) if bias is None else (x, kernels, bias)
    return _make("conv2d", inputs, out, fn)


def depthwise_conv2d(x: Tensor, kernels: Tensor) -> Tensor:
    """Per-channel same-padded stride-1 convolution: one k x k kernel per channel.

    ``x``: (C, T, F); ``kernels``: (C, k, k).
    """
    if x.ndim != 3 or kernels.ndim != 3:
        raise ValueError("depthwise_conv2d expects x (C,T,F) and kernels (C,k,k)")
    c, kh, kw = kernels.shape
    if kh != kw:
        raise ValueError("depthwise_conv2d: square kernels only")
    if c != x.shape[0]:
        raise ValueError(f"depthwise_conv2d: input has {x.shape[0]} channels, kernels have {c}")
    p = _check_kernel("depthwise_conv2d", kh)

    xp = _same_pad(x.data, p)
    out = np.einsum("ctfij,cij->ctf", _windows(xp, kh), kernels.data, optimize=True)

    def fn(g):
        g_k = np.einsum("ctfij,ctf->cij", _windows(xp, kh), g, optimize=True)
        gp = _same_pad(g, p)
        g_x = np.einsum("ctfij,cij->ctf", _windows(gp, kh), kernels.data[:, ::-1, ::-1], optimize=True)
        return (g_x, g_k)

    return _make("depthwise_conv2d", (x, kernels), out, fn)


def transpose_conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None) -> Tensor:
    """Exact adjoint of :func:`conv2d` with the same stride-1/same-padding geometry.

    ``x``: (C_in, T, F); ``kernels``: (C_in, C_out, k, k); ``bias``: (C_out,).
    Spatial dims are preserved; only the channel count changes.
    """
    if x.ndim != 3 or kernels.ndim != 4:
        raise ValueError("transpose_conv2d expects x (C,T,F) and kernels (C_in,C_out,k,k)")
    c_in, c_out, kh, kw = kernels.shape
    if kh != kw:
        raise ValueError("transpose_conv2d: square kernels only")
    if c_in != x.shape[0]:
        raise ValueError(f"transpose_conv2d: input has {x.shape[0]} channels, kernels expect {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ValueError(f"transpose_conv2d: bias shape {bias.shape} != ({c_out},)")
    p = _check_kernel("transpose_conv2d", kh)

    xp = _same_pad(x.data, p)
    flipped = kernels.data[:, :, ::-1, ::-1]
    out = np.einsum("ctfij,coij->otf", _windows(xp, kh), flipped, optimize=True)
    if bias is not None:
        out = out + bias.data[:, None, None]

    def fn(g):
        g_b = g.sum(axis=(1, 2)) if bias is not None else None
        gp = _same_pad(g, p)
        g_x = np.einsum("otfij,coij->ctf", _windows(gp, kh), kernels.data, optimize=True)
        g_k_flipped = np.einsum("ctfij,otf->ocij", _windows(xp, kh), g, optimize=True)
        g_k = np.transpose(g_k_flipped, (1, 0, 2, 3))[:, :, ::-1, ::-1]
        if bias is not None:
            return (g_x, np.ascontiguousarray(g_k), g_b)
        return (g_x, np.ascontiguousarray(g_k))

    inputs = (x, kernels) if bias is None else (x, kernels, bias)
    return _make("transpose_conv2d", inputs, out, fn)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ValueError("concat of an empty sequence")
    ts = tuple(tensors)
    axis = axis % ts[0].ndim
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=axis))

    return _make("concat", ts, out, fn)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice ``[start, start+length)`` along ``axis``."""
    axis = axis % x.ndim
    if start < 0 or length < 1 or start + length > x.shape[axis]:
        raise ValueError(f"narrow: slice [{start}, {start + length}) out of range for extent {x.shape[axis]}")
    idx = tuple(slice(start, start + length) if i == axis else slice(None) for i in range(x.ndim))
    out = np.ascontiguousarray(x.data[idx])

    def fn(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return _make("narrow", (x,), out, fn)
