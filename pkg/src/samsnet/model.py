"""The separation network: sliced multi-head attention over spectrogram maps.

Data flow for a (2, T, F) magnitude spectrogram:

    input conv (2 -> C)
    N x block:
        x = x + LN(SlicedAttention(LN(x)))      [skipped when attention off]
        x = x + LN(PointwiseConv(DepthwiseConv(LN(x))))
    output transpose conv (C -> 2) -> non-negative mask activation

Attention runs per channel: each head projects the features with 1x1 convs
into queries/keys/values, attends over time frames with softmax(Q K^T /
sqrt(C)) V, head outputs are concatenated along channels, and a 3x3 conv
recovers H*C -> C.  Slicing splits the time axis into ``I`` contiguous
chunks that attend independently (remainder frames join the last chunk);
it is an inference-time device, training always sees the whole excerpt.

Layer norms standardize over (channel, frequency) per time frame and carry
per-(channel, frequency) gain/bias, one norm entering and one leaving each
residual branch.  Both sit inside the branch, so zeroing a sublayer's
output projection still makes the whole block an exact identity.

Checkpoint format (little-endian):

    magic ``b"SMSNCKPT"`` | u32 version=1 | u32 header length | header JSON
    then per parameter, in the order listed in the header:
        u8 ndim | u32 * ndim shape | raw float32 (or float64) data
    optional optimizer section (flagged in the header):
        u64 step count | first-moment arrays | second-moment arrays

The header JSON carries the model config, dtype, parameter name order, and
free-form metadata (target source name, epoch, validation loss).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from typing import BinaryIO, Sequence

import numpy as np

from .optim import Adam, AdamState
from .tensor import (
    Tensor,
    add,
    concat,
    conv2d,
    depthwise_conv2d,
    layer_norm,
    matmul_batched,
    narrow,
    relu,
    scale,
    sigmoid,
    softmax_rows,
    transpose_conv2d,
)

__all__ = [
    "ModelConfig",
    "SamsNet",
    "HeadParams",
    "MultiHeadParams",
    "scaled_attention",
    "multi_head",
    "sliced_attention",
    "param_count",
    "CheckpointError",
    "save_checkpoint",
    "load_checkpoint",
]

_MAGIC = b"SMSNCKPT"
_VERSION = 1

MASK_ACTIVATIONS = ("relu", "sigmoid")
ATTENTION_SCALES = ("channels", "bins")


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters; defaults follow the published 44.1 kHz setup."""

    n_blocks: int = 3
    n_heads: int = 2
    channels: int = 64
    n_bins: int = 2049
    slice_count: int = 12
    input_kernel: int = 3
    recovery_kernel: int = 3
    dw_kernel: int = 3
    mask_activation: str = "relu"
    attention_enabled: bool = True
    attention_scale: str = "channels"
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.n_blocks < 0:
            raise ValueError("n_blocks must be >= 0")
        if self.n_heads < 1 or self.channels < 1 or self.n_bins < 1:
            raise ValueError("n_heads, channels and n_bins must be >= 1")
        if self.slice_count < 1:
            raise ValueError("slice_count must be >= 1")
        for name in ("input_kernel", "recovery_kernel", "dw_kernel"):
            k = getattr(self, name)
            if k < 1 or k % 2 == 0:
                raise ValueError(f"{name} must be odd and >= 1")
        if self.mask_activation not in MASK_ACTIVATIONS:
            raise ValueError(f"mask_activation must be one of {MASK_ACTIVATIONS}")
        if self.attention_scale not in ATTENTION_SCALES:
            raise ValueError(f"attention_scale must be one of {ATTENTION_SCALES}")
        if self.ln_eps <= 0:
            raise ValueError("ln_eps must be positive")


@dataclass
class HeadParams:
    query_kernel: Tensor
    query_bias: Tensor
    key_kernel: Tensor
    key_bias: Tensor
    value_kernel: Tensor
    value_bias: Tensor


@dataclass
class MultiHeadParams:
    heads: list[HeadParams]
    recovery_kernel: Tensor
    recovery_bias: Tensor
    scale: float


def scaled_attention(q: Tensor, k: Tensor, v: Tensor, att_scale: float) -> Tensor:
    """Per-channel softmax(Q K^T * att_scale) V over time frames."""
    if not (q.shape == k.shape == v.shape):
        raise ValueError(f"q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    logits = scale(matmul_batched(q, k, transpose_b=True), att_scale)
    weights = softmax_rows(logits)
    return matmul_batched(weights, v)


def multi_head(feat: Tensor, params: MultiHeadParams) -> Tensor:
    """H attention heads, concatenated along channels, recovered to C."""
    head_outputs = []
    for head in params.heads:
        q = conv2d(feat, head.query_kernel, head.query_bias)
        k = conv2d(feat, head.key_kernel, head.key_bias)
        v = conv2d(feat, head.value_kernel, head.value_bias)
        head_outputs.append(scaled_attention(q, k, v, params.scale))
    stacked = concat(head_outputs, axis=0) if len(head_outputs) > 1 else head_outputs[0]
    return conv2d(stacked, params.recovery_kernel, params.recovery_bias)


def chunk_bounds(n_frames: int, slice_count: int) -> list[tuple[int, int]]:
    """(start, length) per chunk; remainder frames join the last chunk."""
    if slice_count < 1:
        raise ValueError("slice_count must be >= 1")
    if slice_count > n_frames:
        raise ValueError(f"cannot slice {n_frames} frames into {slice_count} chunks")
    base = n_frames // slice_count
    bounds = [(i * base, base) for i in range(slice_count)]
    start, _ = bounds[-1]
    bounds[-1] = (start, n_frames - start)
    return bounds


def sliced_attention(feat: Tensor, slice_count: int, params: MultiHeadParams) -> Tensor:
    """Multi-head attention applied independently to ``slice_count`` chunks
    of the time axis, outputs concatenated in original order."""
    t = feat.shape[1]
    pieces = [
        multi_head(narrow(feat, 1, start, length), params)
        for start, length in chunk_bounds(t, slice_count)
    ]
    return concat(pieces, axis=1)


def _norm_names(prefix: str) -> tuple[str, str]:
    return f"{prefix}.gain", f"{prefix}.bias"


class SamsNet:
    """Parameter container plus the forward pass producing a 2-channel mask."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        cfg = config

        def conv_param(name: str, c_out: int, c_in: int, k: int):
            limit = np.sqrt(6.0 / (c_in * k * k))
            kernel = rng.uniform(-limit, limit, size=(c_out, c_in, k, k))
            self._add(f"{name}.kernel", kernel)
            self._add(f"{name}.bias", np.zeros(c_out))

        def norm_param(prefix: str):
            gain, bias = _norm_names(prefix)
            self._add(gain, np.ones((cfg.channels, cfg.n_bins)))
            self._add(bias, np.zeros((cfg.channels, cfg.n_bins)))

        conv_param("input", cfg.channels, 2, cfg.input_kernel)
        for b in range(cfg.n_blocks):
            if cfg.attention_enabled:
                norm_param(f"block{b}.attn_norm_in")
                for h in range(cfg.n_heads):
                    for proj in ("query", "key", "value"):
                        conv_param(f"block{b}.head{h}.{proj}", cfg.channels, cfg.channels, 1)
                conv_param(f"block{b}.recovery", cfg.channels, cfg.n_heads * cfg.channels, cfg.recovery_kernel)
                norm_param(f"block{b}.attn_norm_out")
            norm_param(f"block{b}.conv_norm_in")
            limit = np.sqrt(6.0 / (cfg.dw_kernel * cfg.dw_kernel))
            self._add(f"block{b}.depthwise.kernel", rng.uniform(-limit, limit, size=(cfg.channels, cfg.dw_kernel, cfg.dw_kernel)))
            conv_param(f"block{b}.pointwise", cfg.channels, cfg.channels, 1)
            norm_param(f"block{b}.conv_norm_out")
        # output transform stored in transpose-conv layout (C_in, C_out, k, k)
        limit = np.sqrt(6.0 / (cfg.channels * cfg.input_kernel**2))
        self._add("output.kernel", rng.uniform(-limit, limit, size=(cfg.channels, 2, cfg.input_kernel, cfg.input_kernel)))
        self._add("output.bias", np.zeros(2))

    def _add(self, name: str, values: np.ndarray) -> None:
        self.params[name] = Tensor(values.astype(self.dtype), requires_grad=True)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    @property
    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def _attention_scale(self) -> float:
        dim = self.config.channels if self.config.attention_scale == "channels" else self.config.n_bins
        return 1.0 / float(np.sqrt(dim))

    def block_attention_params(self, b: int) -> MultiHeadParams:
        p = self.params
        heads = [
            HeadParams(
                p[f"block{b}.head{h}.query.kernel"], p[f"block{b}.head{h}.query.bias"],
                p[f"block{b}.head{h}.key.kernel"], p[f"block{b}.head{h}.key.bias"],
                p[f"block{b}.head{h}.value.kernel"], p[f"block{b}.head{h}.value.bias"],
            )
            for h in range(self.config.n_heads)
        ]
        return MultiHeadParams(heads, p[f"block{b}.recovery.kernel"], p[f"block{b}.recovery.bias"], self._attention_scale())

    def _norm(self, x: Tensor, prefix: str) -> Tensor:
        gain, bias = _norm_names(prefix)
        return layer_norm(x, self.params[gain], self.params[bias], axes=(0, 2), eps=self.config.ln_eps)

    def transform_in(self, mag: Tensor) -> Tensor:
        if mag.ndim != 3 or mag.shape[0] != 2:
            raise ValueError(f"expected magnitude shaped (2, T, F), got {mag.shape}")
        if mag.shape[2] != self.config.n_bins:
            raise ValueError(f"input has {mag.shape[2]} bins, model expects {self.config.n_bins}")
        return conv2d(mag, self.params["input.kernel"], self.params["input.bias"])

    def transform_out(self, feat: Tensor) -> Tensor:
        out = transpose_conv2d(feat, self.params["output.kernel"], self.params["output.bias"])
        return relu(out) if self.config.mask_activation == "relu" else sigmoid(out)

    def attention_block(self, feat: Tensor, b: int, slice_count: int) -> Tensor:
        cfg = self.config
        if cfg.attention_enabled:
            branch = self._norm(feat, f"block{b}.attn_norm_in")
            branch = sliced_attention(branch, slice_count, self.block_attention_params(b))
            branch = self._norm(branch, f"block{b}.attn_norm_out")
            feat = add(feat, branch)
        branch = self._norm(feat, f"block{b}.conv_norm_in")
        branch = depthwise_conv2d(branch, self.params[f"block{b}.depthwise.kernel"])
        branch = conv2d(branch, self.params[f"block{b}.pointwise.kernel"], self.params[f"block{b}.pointwise.bias"])
        branch = self._norm(branch, f"block{b}.conv_norm_out")
        return add(feat, branch)

    def forward(self, mag: Tensor, slices: int | None = None) -> Tensor:
        """Magnitude (2, T, F) -> non-negative mask (2, T, F).

        ``slices=None`` is training mode: attention spans the whole input
        (identical to ``slices=1``).  At inference pass the chunk count.
        """
        t = mag.shape[1] if mag.ndim == 3 else 0
        slice_count = 1 if slices is None else int(slices)
        if slice_count < 1:
            raise ValueError("slices must be >= 1")
        if slice_count > t:
            raise ValueError(f"slices={slice_count} exceeds {t} frames")
        x = self.transform_in(mag)
        for b in range(self.config.n_blocks):
            x = self.attention_block(x, b, slice_count)
        return self.transform_out(x)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def param_count(config: ModelConfig) -> int:
    """Exact scalar-parameter count as a closed form over the config."""
    c, f, h = config.channels, config.n_bins, config.n_heads
    norm = 2 * c * f  # gain + bias
    count = c * 2 * config.input_kernel**2 + c  # input conv
    per_block = 0
    if config.attention_enabled:
        per_block += 2 * norm
        per_block += h * 3 * (c * c + c)  # 1x1 q/k/v per head
        per_block += c * (h * c) * config.recovery_kernel**2 + c
    per_block += 2 * norm
    per_block += c * config.dw_kernel**2  # depthwise, no bias
    per_block += c * c + c  # pointwise 1x1
    count += config.n_blocks * per_block
    count += 2 * c * config.input_kernel**2 + 2  # output transpose conv
    return count


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------


class CheckpointError(ValueError):
    """Unreadable, truncated, or version-mismatched checkpoint."""


def _write_array(fh: BinaryIO, arr: np.ndarray, dtype: np.dtype) -> None:
    fh.write(struct.pack("<B", arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(np.ascontiguousarray(arr, dtype=dtype.newbyteorder("<")).tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint file")
    return buf


def _read_array(fh: BinaryIO, dtype: np.dtype) -> np.ndarray:
    (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
    shape = tuple(struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(ndim))
    n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if shape else dtype.itemsize
    if shape == ():
        n_bytes = dtype.itemsize
    data = np.frombuffer(_read_exact(fh, n_bytes), dtype=dtype.newbyteorder("<"))
    return data.reshape(shape).astype(dtype, copy=True)


def save_checkpoint(path, model: SamsNet, optimizer: Adam | None = None, meta: dict | None = None) -> None:
    """Write model (and optionally Adam state) in the versioned binary format.

    The write is atomic: data goes to a temp file that is renamed into place.
    """
    import os

    header = {
        "config": asdict(model.config),
        "dtype": model.dtype.name,
        "param_names": [name for name, _ in model.parameters()],
        "has_optimizer": optimizer is not None,
        "meta": dict(meta or {}),
    }
    if optimizer is not None:
        header["optimizer"] = {
            "lr": optimizer.lr,
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "eps": optimizer.eps,
        }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, p in model.parameters():
            _write_array(fh, p.data, model.dtype)
        if optimizer is not None:
            fh.write(struct.pack("<Q", optimizer.state.t))
            for m in optimizer.state.m:
                _write_array(fh, m, model.dtype)
            for v in optimizer.state.v:
                _write_array(fh, v, model.dtype)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[SamsNet, Adam | None, dict]:
    """Read a checkpoint; returns (model, optimizer or None, meta)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise CheckpointError(f"{path}: bad magic bytes; not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != _VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", _read_exact(fh, 4))
        try:
            header = json.loads(_read_exact(fh, hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt header ({exc})") from exc

        config = ModelConfig(**header["config"])
        dtype = np.dtype(header["dtype"])
        model = SamsNet(config, dtype=dtype)
        names = header["param_names"]
        if names != [name for name, _ in model.parameters()]:
            raise CheckpointError(f"{path}: parameter inventory does not match the config")
        for name in names:
            arr = _read_array(fh, dtype)
            if arr.shape != model.params[name].shape:
                raise CheckpointError(f"{path}: shape mismatch for parameter {name}")
            model.params[name].data[...] = arr

        optimizer = None
        if header.get("has_optimizer"):
            opt_cfg = header.get("optimizer", {})
            optimizer = Adam(
                [p for _, p in model.parameters()],
                lr=opt_cfg.get("lr", 1e-4),
                beta1=opt_cfg.get("beta1", 0.9),
                beta2=opt_cfg.get("beta2", 0.999),
                eps=opt_cfg.get("eps", 1e-8),
            )
            (t,) = struct.unpack("<Q", _read_exact(fh, 8))
            m = [_read_array(fh, dtype) for _ in names]
            v = [_read_array(fh, dtype) for _ in names]
            optimizer.load_state(AdamState(m=m, v=v, t=t))
        return model, optimizer, header.get("meta", {})
