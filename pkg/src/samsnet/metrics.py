"""Separation quality metrics and test-set evaluation.

The metric is a simplified SDR, 10*log10(||s||^2 / ||s - s_hat||^2) over
both channels jointly, without the allowed-distortion filter decomposition
of the full BSSEval family; it strictly upper-bounds distortion and is
labeled "SDR (simplified)" in every report.  Per track and source the
score is the median over 1-second non-overlapping frames (frames whose
reference sits below -60 dBFS are skipped; perfect frames are capped at
+100 dB), and per-source scores average over tracks.
"""

from __future__ import annotations

import io
import sys
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .dataset import DatasetSplit, StemTrack, load_track
from .model import SamsNet
from .stft import ComplexSpectrogram, FrameParams, Waveform, reconstruct_source, stft
from .tensor import Tensor

__all__ = [
    "EvalConfig",
    "EvalRow",
    "EvalReport",
    "sdr",
    "framewise_median_sdr",
    "irm_oracle",
    "separate_track",
    "evaluate_testset",
    "mixture_as_estimate",
    "slice_sweep",
]

METRIC_LABEL = "SDR (simplified)"
SDR_CAP_DB = 100.0
SILENCE_GATE_DB = -60.0
IRM_EPS = 1e-8


@dataclass
class EvalConfig:
    slices: int = 1
    frame: FrameParams = field(default_factory=FrameParams)
    metric_frame_seconds: float = 1.0

    def __post_init__(self):
        if self.slices < 1:
            raise ValueError("slices must be >= 1")
        if self.metric_frame_seconds <= 0:
            raise ValueError("metric_frame_seconds must be positive")


def _as_samples(w) -> np.ndarray:
    return w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)


def sdr(reference, estimate, cap_db: float = SDR_CAP_DB) -> float:
    """10*log10(signal energy / error energy), both channels jointly."""
    ref = _as_samples(reference)
    est = _as_samples(estimate)
    if ref.shape != est.shape:
        raise ValueError(f"length mismatch: reference {ref.shape}, estimate {est.shape}")
    signal = float(np.sum(ref**2))
    if signal == 0.0:
        raise ValueError("reference is all zeros; SDR undefined")
    error = float(np.sum((ref - est) ** 2))
    if error == 0.0:
        return cap_db
    return min(10.0 * np.log10(signal / error), cap_db)


def framewise_median_sdr(
    reference,
    estimate,
    sample_rate: int | None = None,
    frame_seconds: float = 1.0,
    silence_gate_db: float = SILENCE_GATE_DB,
    cap_db: float = SDR_CAP_DB,
) -> float:
    """Median SDR over non-overlapping frames, skipping silent reference frames."""
    if sample_rate is None:
        if not isinstance(reference, Waveform):
            raise ValueError("sample_rate required when reference is a bare array")
        sample_rate = reference.sample_rate
    ref = _as_samples(reference)
    est = _as_samples(estimate)
    if ref.shape != est.shape:
        raise ValueError(f"length mismatch: reference {ref.shape}, estimate {est.shape}")

    frame_len = int(round(frame_seconds * sample_rate))
    n_frames = ref.shape[1] // frame_len
    if n_frames == 0:
        raise ValueError("signal shorter than one metric frame")
    gate = 10.0 ** (silence_gate_db / 10.0)
    values = []
    for i in range(n_frames):
        lo, hi = i * frame_len, (i + 1) * frame_len
        r = ref[:, lo:hi]
        if float(np.mean(r**2)) < gate:
            continue
        values.append(sdr(r, est[:, lo:hi], cap_db=cap_db))
    if not values:
        raise ValueError("every metric frame is silent; SDR undefined")
    return float(np.median(values))


def irm_oracle(
    mix_spec: ComplexSpectrogram, source_mags: Mapping[str, np.ndarray], eps: float = IRM_EPS
) -> dict[str, np.ndarray]:
    """Ideal ratio masks |S_i| / (sum_j |S_j| + eps) from ground-truth stems."""
    total = None
    for name, mag in source_mags.items():
        mag = np.asarray(mag, dtype=np.float64)
        if mag.shape != mix_spec.magnitude.shape:
            raise ValueError(f"source '{name}' magnitude shape {mag.shape} mismatches mixture")
        total = mag.copy() if total is None else total + mag
    if total is None:
        raise ValueError("no sources given")
    denom = total + eps
    return {name: np.asarray(mag, dtype=np.float64) / denom for name, mag in source_mags.items()}


@dataclass
class EvalRow:
    track: str
    source: str
    median_sdr_db: float


@dataclass
class EvalReport:
    """Table-shaped result: per-(track, source) medians plus averages."""

    rows: list[EvalRow]
    source_names: tuple[str, ...]
    skipped: list[tuple[str, str]] = field(default_factory=list)  # (track, reason)
    label: str = METRIC_LABEL

    def per_source_average(self) -> dict[str, float]:
        return {
            s: float(np.mean([r.median_sdr_db for r in self.rows if r.source == s]))
            for s in self.source_names
        }

    def overall_average(self) -> float:
        return float(np.mean(list(self.per_source_average().values())))

    def tracks(self) -> list[str]:
        seen = dict.fromkeys(r.track for r in self.rows)
        return list(seen)

    def write_csv(self, fh, slices: int | None = None) -> None:
        header = "track,source,median_sdr_db"
        if slices is not None:
            header = "slices," + header
        fh.write(header + "\n")
        for r in self.rows:
            prefix = f"{slices}," if slices is not None else ""
            fh.write(f"{prefix}{r.track},{r.source},{r.median_sdr_db:.6f}\n")

    def format_table(self) -> str:
        widths = max([len(t) for t in self.tracks()] + [7])
        cols = list(self.source_names) + ["Average"]
        out = io.StringIO()
        out.write(f"{self.label}, dB\n")
        out.write("track".ljust(widths) + "".join(c.rjust(12) for c in cols) + "\n")
        by_track: dict[str, dict[str, float]] = {}
        for r in self.rows:
            by_track.setdefault(r.track, {})[r.source] = r.median_sdr_db
        for track, values in by_track.items():
            row_avg = float(np.mean([values[s] for s in self.source_names]))
            out.write(track.ljust(widths))
            out.write("".join(f"{values[s]:12.2f}" for s in self.source_names))
            out.write(f"{row_avg:12.2f}\n")
        avgs = self.per_source_average()
        out.write("average".ljust(widths))
        out.write("".join(f"{avgs[s]:12.2f}" for s in self.source_names))
        out.write(f"{self.overall_average():12.2f}\n")
        for track, reason in self.skipped:
            out.write(f"skipped {track}: {reason}\n")
        return out.getvalue()


def separate_track(
    models: Mapping[str, SamsNet], mixture: Waveform, cfg: EvalConfig
) -> dict[str, Waveform]:
    """Run every source model on one mixture and reconstruct the estimates."""
    spec = stft(mixture, cfg.frame)
    if cfg.slices > spec.n_frames:
        raise ValueError(f"slices={cfg.slices} exceeds {spec.n_frames} frames")
    estimates = {}
    for name, model in models.items():
        mag = Tensor(spec.magnitude.astype(model.dtype))
        mask = model.forward(mag, slices=cfg.slices)
        estimates[name] = reconstruct_source(spec, mask.data, mixture.n_samples)
    return estimates


def _evaluate(
    estimate_fn: Callable[[StemTrack], dict[str, Waveform]],
    split: DatasetSplit,
    sources: Sequence[str],
    cfg: EvalConfig,
) -> EvalReport:
    rows: list[EvalRow] = []
    skipped: list[tuple[str, str]] = []
    for handle in split.test:
        track = load_track(handle)
        try:
            estimates = estimate_fn(track)
        except ValueError as exc:
            skipped.append((handle.name, str(exc)))
            continue
        for source in sources:
            score = framewise_median_sdr(
                track.sources[source], estimates[source], frame_seconds=cfg.metric_frame_seconds
            )
            rows.append(EvalRow(handle.name, source, score))
    return EvalReport(rows=rows, source_names=tuple(sources), skipped=skipped)


def evaluate_testset(
    models: Mapping[str, SamsNet], split: DatasetSplit, cfg: EvalConfig
) -> EvalReport:
    """Separate every test track and report framewise-median SDR per source."""
    if not split.test:
        raise ValueError("test split is empty")
    missing = [s for s in split.sources if s not in models]
    if missing:
        raise ValueError(f"missing model for source(s): {missing}")
    return _evaluate(
        lambda track: separate_track(models, track.mixture, cfg), split, split.sources, cfg
    )


def mixture_as_estimate(split: DatasetSplit, cfg: EvalConfig) -> EvalReport:
    """Baseline: the unprocessed mixture serves as the estimate of every source."""
    if not split.test:
        raise ValueError("test split is empty")
    return _evaluate(
        lambda track: {s: track.mixture for s in split.sources}, split, split.sources, cfg
    )


def slice_sweep(
    models: Mapping[str, SamsNet],
    split: DatasetSplit,
    slice_counts: Sequence[int],
    cfg: EvalConfig,
) -> list[tuple[int, EvalReport]]:
    """One evaluation per slice count; tracks too short for a count are
    reported as skipped rather than silently dropped."""
    if not slice_counts:
        raise ValueError("slice_counts is empty")
    out = []
    for count in slice_counts:
        run_cfg = EvalConfig(slices=count, frame=cfg.frame, metric_frame_seconds=cfg.metric_frame_seconds)
        out.append((count, evaluate_testset(models, split, run_cfg)))
    return out
