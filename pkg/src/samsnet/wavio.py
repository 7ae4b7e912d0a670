"""Minimal RIFF/WAVE reader and writer.

Supports the two encodings used by the toolkit: 16-bit PCM and 32-bit IEEE
float, interleaved, any channel count on read.  Samples are exchanged as
float arrays shaped (channels, n_samples) in the nominal [-1, 1] range.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

__all__ = ["WavFormatError", "read_wav", "write_wav"]

_PCM = 1
_IEEE_FLOAT = 3
_EXTENSIBLE = 0xFFFE


class WavFormatError(ValueError):
    """Malformed or unsupported WAV content."""


def read_wav(path) -> tuple[np.ndarray, int]:
    """Read a WAV file; returns (samples (channels, n), sample_rate).

    Samples come back as float64 in [-1, 1] for PCM16 and verbatim for
    float32 data.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        chunk_id = raw[pos : pos + 4]
        (chunk_size,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8 : pos + 8 + chunk_size]
        if chunk_id == b"fmt ":
            if chunk_size < 16:
                raise WavFormatError(f"{path}: truncated fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            data = body
        pos += 8 + chunk_size + (chunk_size & 1)  # chunks are word-aligned

    if fmt is None or data is None:
        raise WavFormatError(f"{path}: missing fmt or data chunk")
    audio_format, channels, rate, _, _, bits = fmt
    if audio_format == _EXTENSIBLE:
        # subformat GUID starts with the base format tag
        if len(raw) < 1:
            raise WavFormatError(f"{path}: truncated extensible header")
        audio_format = _PCM if bits == 16 else _IEEE_FLOAT

    if channels < 1:
        raise WavFormatError(f"{path}: invalid channel count {channels}")

    if audio_format == _PCM and bits == 16:
        flat = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32767.0
    elif audio_format == _IEEE_FLOAT and bits == 32:
        flat = np.frombuffer(data, dtype="<f4").astype(np.float64)
    else:
        raise WavFormatError(
            f"{path}: unsupported encoding (format {audio_format}, {bits}-bit); "
            "only 16-bit PCM and 32-bit float are handled"
        )

    n = flat.size // channels
    samples = flat[: n * channels].reshape(n, channels).T
    return np.ascontiguousarray(samples), rate


def write_wav(path, samples: np.ndarray, sample_rate: int, encoding: str = "float32") -> None:
    """Write (channels, n) float samples as 16-bit PCM or 32-bit float WAV."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise ValueError("samples must be shaped (channels, n_samples)")
    channels, n = samples.shape
    interleaved = samples.T.reshape(-1)

    if encoding == "pcm16":
        fmt_tag, bits = _PCM, 16
        clipped = np.clip(interleaved, -1.0, 1.0)
        payload = (np.round(clipped * 32767.0)).astype("<i2").tobytes()
    elif encoding == "float32":
        fmt_tag, bits = _IEEE_FLOAT, 32
        payload = interleaved.astype("<f4").tobytes()
    else:
        raise ValueError(f"unknown encoding {encoding!r}; use 'pcm16' or 'float32'")

    block_align = channels * bits // 8
    fmt_chunk = struct.pack("<HHIIHH", fmt_tag, channels, sample_rate, sample_rate * block_align, block_align, bits)
    chunks = [b"fmt ", struct.pack("<I", len(fmt_chunk)), fmt_chunk]
    if fmt_tag == _IEEE_FLOAT:
        chunks += [b"fact", struct.pack("<I", 4), struct.pack("<I", n)]
    chunks += [b"data", struct.pack("<I", len(payload)), payload]
    if len(payload) & 1:
        chunks.append(b"\x00")
    body = b"".join(chunks)

    with open(path, "wb") as fh:
        fh.write(b"RIFF")
        fh.write(struct.pack("<I", 4 + len(body)))
        fh.write(b"WAVE")
        fh.write(body)
