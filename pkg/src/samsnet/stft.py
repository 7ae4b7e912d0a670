"""Waveforms, complex spectrograms, and the STFT/ISTFT pair.

Analysis: periodic Hamming window, window length == DFT size, hop = window/4
by default (75% overlap), one-sided spectra (F = window/2 + 1).  The tail is
zero-padded to a whole frame.  Synthesis uses weighted overlap-add with
squared-window normalization, which makes ``istft(stft(x))`` exact up to
floating-point rounding wherever the window sum is nonzero (everywhere, for
Hamming).

``masked_istft`` is the differentiable bridge used in training: it
reconstructs a source from the mixture magnitude, a mask, and the mixture
phase, and backpropagates through the linear ISTFT chain to the mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import wavio
from .tensor import Tensor, _make

__all__ = [
    "FrameParams",
    "Waveform",
    "ComplexSpectrogram",
    "hamming_window",
    "stft",
    "istft",
    "reconstruct_source",
    "masked_istft",
    "load_waveform",
    "save_waveform",
]

DEFAULT_SAMPLE_RATE = 44100


@dataclass(frozen=True)
class FrameParams:
    """STFT framing: window length == DFT size, hop in samples."""

    window: int = 4096
    hop: int = 1024

    def __post_init__(self):
        if self.window < 2 or self.window % 2 != 0:
            raise ValueError("window length must be even and >= 2")
        if not (0 < self.hop <= self.window):
            raise ValueError("hop must be in (0, window]")

    @property
    def n_bins(self) -> int:
        return self.window // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.window:
            raise ValueError(
                f"signal of {n_samples} samples is shorter than one window ({self.window})"
            )
        return 1 + int(np.ceil((n_samples - self.window) / self.hop))

    def covered(self, n_frames: int) -> int:
        return self.window + (n_frames - 1) * self.hop


@dataclass
class Waveform:
    """Stereo PCM: samples shaped (2, n), nominal range [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2 or self.samples.shape[0] != 2:
            raise ValueError(f"waveforms are stereo: expected shape (2, n), got {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate

    def slice(self, start: int, length: int) -> "Waveform":
        if start < 0 or start + length > self.n_samples:
            raise ValueError("slice out of range")
        return Waveform(self.samples[:, start : start + length].copy(), self.sample_rate)


@dataclass
class ComplexSpectrogram:
    """Per-channel magnitude and phase, shaped (2, T, F)."""

    magnitude: np.ndarray
    phase: np.ndarray
    params: FrameParams
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.magnitude = np.asarray(self.magnitude, dtype=np.float64)
        self.phase = np.asarray(self.phase, dtype=np.float64)
        if self.magnitude.shape != self.phase.shape:
            raise ValueError("magnitude and phase shapes differ")
        if self.magnitude.ndim != 3 or self.magnitude.shape[0] != 2:
            raise ValueError(f"expected shape (2, T, F), got {self.magnitude.shape}")
        if self.magnitude.shape[2] != self.params.n_bins:
            raise ValueError(
                f"{self.magnitude.shape[2]} bins inconsistent with window {self.params.window}"
            )
        if np.any(self.magnitude < 0):
            raise ValueError("magnitude must be non-negative")

    @property
    def n_frames(self) -> int:
        return self.magnitude.shape[1]

    @property
    def n_bins(self) -> int:
        return self.magnitude.shape[2]

    def complex_values(self) -> np.ndarray:
        return self.magnitude * np.exp(1j * self.phase)


@lru_cache(maxsize=8)
def hamming_window(length: int) -> np.ndarray:
    """Periodic Hamming window (DFT-even), strictly positive."""
    n = np.arange(length)
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * n / length)


@lru_cache(maxsize=8)
def _window_sum(params: FrameParams, n_frames: int) -> np.ndarray:
    win2 = hamming_window(params.window) ** 2
    total = params.covered(n_frames)
    wsum = np.zeros(total)
    for t in range(n_frames):
        wsum[t * params.hop : t * params.hop + params.window] += win2
    return wsum


def _frames(x: np.ndarray, params: FrameParams) -> np.ndarray:
    """(2, L) -> (2, T, window) with the tail zero-padded to a whole frame."""
    n = x.shape[1]
    t = params.n_frames(n)
    total = params.covered(t)
    if total > n:
        x = np.pad(x, ((0, 0), (0, total - n)))
    view = np.lib.stride_tricks.sliding_window_view(x, params.window, axis=1)
    return view[:, :: params.hop][:, :t]


def stft(w: Waveform, params: FrameParams = FrameParams()) -> ComplexSpectrogram:
    """One-sided STFT per channel: (2, T, F) magnitude and phase."""
    frames = _frames(w.samples, params) * hamming_window(params.window)
    spec = np.fft.rfft(frames, n=params.window, axis=-1)
    return ComplexSpectrogram(np.abs(spec), np.angle(spec), params, w.sample_rate)


def _synthesize(cplx: np.ndarray, params: FrameParams, length: int) -> np.ndarray:
    """Weighted overlap-add of complex frames -> (2, length) samples."""
    n_frames = cplx.shape[1]
    total = params.covered(n_frames)
    if length > total:
        raise ValueError(
            f"requested {length} samples but {n_frames} frames cover only {total}"
        )
    win = hamming_window(params.window)
    frames = np.fft.irfft(cplx, n=params.window, axis=-1) * win
    out = np.zeros((cplx.shape[0], total))
    for t in range(n_frames):
        out[:, t * params.hop : t * params.hop + params.window] += frames[:, t]
    out /= _window_sum(params, n_frames)
    return out[:, :length]


def istft(spec: ComplexSpectrogram, length: int) -> Waveform:
    """Inverse STFT via normalized overlap-add, truncated to ``length``."""
    return Waveform(_synthesize(spec.complex_values(), spec.params, length), spec.sample_rate)


def reconstruct_source(mix_spec: ComplexSpectrogram, mask, length: int) -> Waveform:
    """ISTFT of (|X| * mask) recombined with the mixture phase.

    ``mask``: non-negative array or Tensor shaped like the magnitude.
    """
    mask_arr = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if mask_arr.shape != mix_spec.magnitude.shape:
        raise ValueError(
            f"mask shape {mask_arr.shape} does not match spectrogram {mix_spec.magnitude.shape}"
        )
    if np.any(mask_arr < 0):
        raise ValueError("mask entries must be non-negative")
    cplx = (mix_spec.magnitude * mask_arr.astype(np.float64)) * np.exp(1j * mix_spec.phase)
    return Waveform(_synthesize(cplx, mix_spec.params, length), mix_spec.sample_rate)


def _analysis_adjoint(g: np.ndarray, params: FrameParams, n_frames: int) -> np.ndarray:
    """Adjoint of the synthesis map, complex-domain gradient per bin."""
    total = params.covered(n_frames)
    if g.shape[1] < total:
        g = np.pad(g, ((0, 0), (0, total - g.shape[1])))
    g = g / _window_sum(params, n_frames)
    win = hamming_window(params.window)
    segs = np.empty((g.shape[0], n_frames, params.window))
    for t in range(n_frames):
        segs[:, t] = g[:, t * params.hop : t * params.hop + params.window] * win
    spectra = np.fft.rfft(segs, n=params.window, axis=-1)
    # irfft adjoint: interior bins weigh double (they stand for a conjugate pair)
    fac = np.full(params.n_bins, 2.0 / params.window)
    fac[0] = fac[-1] = 1.0 / params.window
    return spectra * fac


def masked_istft(mask: Tensor, mix_spec: ComplexSpectrogram, length: int) -> Tensor:
    """Differentiable reconstruction: mask -> time-domain source estimate.

    Forward equals :func:`reconstruct_source`; the backward rule propagates
    gradients through the (linear) magnitude-masking + ISTFT chain back to
    the mask tensor.
    """
    if mask.shape != mix_spec.magnitude.shape:
        raise ValueError(
            f"mask shape {mask.shape} does not match spectrogram {mix_spec.magnitude.shape}"
        )
    z = mix_spec.magnitude * np.exp(1j * mix_spec.phase)
    params = mix_spec.params
    n_frames = mix_spec.n_frames
    out = _synthesize(mask.data.astype(np.float64) * z, params, length)

    def fn(g):
        grad_c = _analysis_adjoint(g.astype(np.float64), params, n_frames)
        grad_mask = np.real(np.conj(grad_c) * z)
        return (grad_mask.astype(mask.dtype, copy=False),)

    return _make("masked_istft", (mask,), out.astype(mask.dtype), fn)


def load_waveform(path, dup_mono: bool = False) -> Waveform:
    """Read a WAV file as a stereo :class:`Waveform`.

    Mono files are rejected unless ``dup_mono`` duplicates the channel.
    """
    samples, rate = wavio.read_wav(path)
    if samples.shape[0] == 1:
        if not dup_mono:
            raise ValueError(f"{path}: mono input; pass dup_mono=True to duplicate the channel")
        samples = np.vstack([samples, samples])
    elif samples.shape[0] != 2:
        raise ValueError(f"{path}: expected stereo, got {samples.shape[0]} channels")
    return Waveform(samples, rate)


def save_waveform(path, w: Waveform, encoding: str = "float32") -> None:
    wavio.write_wav(path, w.samples, w.sample_rate, encoding=encoding)
