"""Stem-dataset ingestion, excerpting, augmentation, and the toy fixture.

Expected directory layout (WAV stems, pre-extracted):

    root/
      train/<track>/{mixture,vocals,drums,bass,other}.wav
      test/<track>/...
      validation.txt          # optional: one train-track name per line

Tracks are indexed lazily; audio loads on demand through a small LRU cache.
The synthetic "toy stems" generator writes spectrally disjoint stereo
sources (amplitude-modulated tones vs band-limited noise) whose mixture is
the exact float32 sum of the stems, so desk-scale tests need no real data.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .stft import Waveform, load_waveform, save_waveform

__all__ = [
    "KNOWN_SOURCES",
    "MixtureConsistencyWarning",
    "TrackHandle",
    "StemTrack",
    "DatasetSplit",
    "Excerpt",
    "scan_dataset",
    "load_track",
    "clear_track_cache",
    "random_excerpt",
    "augment_sources",
    "make_toy_dataset",
]

KNOWN_SOURCES = ("vocals", "drums", "bass", "other")
MIXTURE_STEM = "mixture"


class MixtureConsistencyWarning(UserWarning):
    """The stored mixture deviates from the stem sum more than expected."""


@dataclass(frozen=True)
class TrackHandle:
    """Paths to one track's stems; audio not yet loaded."""

    name: str
    mixture_path: Path
    source_paths: tuple[tuple[str, Path], ...]

    @property
    def sources(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.source_paths)


@dataclass
class StemTrack:
    """One song, loaded: the mixture plus its aligned sources."""

    name: str
    mixture: Waveform
    sources: dict[str, Waveform]

    def __post_init__(self):
        n, sr = self.mixture.n_samples, self.mixture.sample_rate
        for stem, w in self.sources.items():
            if w.n_samples != n:
                raise ValueError(
                    f"track '{self.name}': stem '{stem}' has {w.n_samples} samples, mixture has {n}"
                )
            if w.sample_rate != sr:
                raise ValueError(f"track '{self.name}': stem '{stem}' sample rate differs")
        total = sum(w.samples for w in self.sources.values())
        norm = np.linalg.norm(self.mixture.samples)
        if norm > 0:
            rel = np.linalg.norm(self.mixture.samples - total) / norm
            if rel > 1e-3:
                warnings.warn(
                    f"track '{self.name}': mixture deviates from stem sum "
                    f"(relative error {rel:.2e}); real data may clip",
                    MixtureConsistencyWarning,
                    stacklevel=2,
                )

    @property
    def duration(self) -> float:
        return self.mixture.duration


@dataclass
class DatasetSplit:
    train: list[TrackHandle] = field(default_factory=list)
    valid: list[TrackHandle] = field(default_factory=list)
    test: list[TrackHandle] = field(default_factory=list)

    @property
    def sources(self) -> tuple[str, ...]:
        for part in (self.train, self.valid, self.test):
            if part:
                return part[0].sources
        return ()


def _canonical_order(stems: Iterable[str]) -> tuple[str, ...]:
    stems = set(stems)
    ordered = [s for s in KNOWN_SOURCES if s in stems]
    ordered += sorted(stems - set(KNOWN_SOURCES))
    return tuple(ordered)


def _scan_part(part_dir: Path) -> list[TrackHandle]:
    if not part_dir.is_dir():
        return []
    track_wavs: list[tuple[str, dict[str, Path]]] = []
    stem_union: set[str] = set()
    for track_dir in sorted(p for p in part_dir.iterdir() if p.is_dir()):
        wavs = {p.stem: p for p in track_dir.glob("*.wav")}
        if MIXTURE_STEM not in wavs:
            raise FileNotFoundError(f"track '{track_dir.name}' is missing stem '{MIXTURE_STEM}.wav'")
        stems = set(wavs) - {MIXTURE_STEM}
        if not stems:
            raise FileNotFoundError(f"track '{track_dir.name}' has no source stems")
        stem_union |= stems
        track_wavs.append((track_dir.name, wavs))

    expected = _canonical_order(stem_union)
    handles = []
    for name, wavs in track_wavs:
        missing = [s for s in expected if s not in wavs]
        if missing:
            raise FileNotFoundError(f"track '{name}' is missing stem '{missing[0]}.wav'")
        handles.append(
            TrackHandle(
                name=name,
                mixture_path=wavs[MIXTURE_STEM],
                source_paths=tuple((s, wavs[s]) for s in expected),
            )
        )
    return handles


def scan_dataset(root, validation_names: Iterable[str] | None = None) -> DatasetSplit:
    """Index a stem dataset; audio stays on disk until loaded.

    Validation tracks are carved out of ``train`` by name, read from
    ``validation_names`` or from a ``validation.txt`` file at the root
    (UTF-8, one track name per line).
    """
    root = Path(root)
    train = _scan_part(root / "train")
    test = _scan_part(root / "test")

    if validation_names is None:
        val_file = root / "validation.txt"
        if val_file.is_file():
            validation_names = [
                line.strip() for line in val_file.read_text("utf-8").splitlines() if line.strip()
            ]
    val_set = set(validation_names or ())
    unknown = val_set - {h.name for h in train}
    if unknown:
        raise ValueError(f"validation list names unknown train tracks: {sorted(unknown)}")
    valid = [h for h in train if h.name in val_set]
    train = [h for h in train if h.name not in val_set]
    return DatasetSplit(train=train, valid=valid, test=test)


@lru_cache(maxsize=16)
def _load_cached(handle: TrackHandle) -> StemTrack:
    mixture = load_waveform(handle.mixture_path)
    sources = {name: load_waveform(path) for name, path in handle.source_paths}
    return StemTrack(handle.name, mixture, sources)


def load_track(handle: TrackHandle) -> StemTrack:
    return _load_cached(handle)


def clear_track_cache() -> None:
    _load_cached.cache_clear()


@dataclass
class Excerpt:
    """Aligned cut of mixture and sources, all from the same sample offset."""

    mixture: Waveform
    sources: dict[str, Waveform]
    offset: int


def random_excerpt(track: StemTrack, seconds: float, rng: np.random.Generator) -> Excerpt:
    """Uniformly placed excerpt with identical offsets across all stems."""
    n = int(round(seconds * track.mixture.sample_rate))
    total = track.mixture.n_samples
    if n > total:
        raise ValueError(
            f"track '{track.name}' is {track.duration:.2f}s, shorter than the {seconds}s excerpt"
        )
    offset = int(rng.integers(0, total - n + 1))
    return Excerpt(
        mixture=track.mixture.slice(offset, n),
        sources={name: w.slice(offset, n) for name, w in track.sources.items()},
        offset=offset,
    )


def augment_sources(
    sources: Mapping[str, Waveform],
    rng: np.random.Generator,
    gain_range: tuple[float, float] = (0.25, 1.25),
    swap_prob: float = 0.5,
) -> tuple[dict[str, Waveform], Waveform]:
    """Random per-source gains and channel swaps; the mixture is re-summed.

    Draw order is fixed (sorted stem names, gain then swap per stem) so a
    seeded generator reproduces the augmentation exactly.
    """
    lo, hi = gain_range
    out: dict[str, Waveform] = {}
    mix = None
    for name in sorted(sources):
        w = sources[name]
        gain = float(rng.uniform(lo, hi))
        swap = bool(rng.random() < swap_prob)
        samples = w.samples * gain
        if swap:
            samples = samples[::-1].copy()
        out[name] = Waveform(samples, w.sample_rate)
        mix = samples if mix is None else mix + samples
    first = next(iter(sources.values()))
    return out, Waveform(mix if mix is not None else np.zeros((2, 0)), first.sample_rate)


# ---------------------------------------------------------------------------
# synthetic toy stems
# ---------------------------------------------------------------------------

TOY_SOURCES = ("tonal", "noise")


def _toy_tonal(rng, n, sr) -> np.ndarray:
    """A few low-band sinusoids with slow amplitude modulation, stereo."""
    t = np.arange(n) / sr
    channels = []
    freqs = rng.uniform(200.0, 750.0, size=3)
    am_rate = rng.uniform(0.5, 2.0)
    for ch in range(2):
        sig = np.zeros(n)
        for f0 in freqs:
            phase = rng.uniform(0, 2 * np.pi)
            sig += np.sin(2 * np.pi * f0 * t + phase)
        am = 1.0 + 0.5 * np.sin(2 * np.pi * am_rate * t + rng.uniform(0, 2 * np.pi))
        channels.append(sig * am / (len(freqs) * 3.0))
    return np.vstack(channels)


def _toy_noise(rng, n, sr, band=(4000.0, 8000.0)) -> np.ndarray:
    """Band-limited stereo noise: white noise with out-of-band bins zeroed."""
    channels = []
    for ch in range(2):
        white = rng.standard_normal(n)
        spec = np.fft.rfft(white)
        freqs = np.fft.rfftfreq(n, d=1.0 / sr)
        spec[(freqs < band[0]) | (freqs > band[1])] = 0.0
        sig = np.fft.irfft(spec, n=n)
        channels.append(sig / (np.max(np.abs(sig)) * 4.0))
    return np.vstack(channels)


def make_toy_dataset(
    root,
    n_train: int = 5,
    n_valid: int = 1,
    n_test: int = 2,
    duration: float = 30.0,
    sample_rate: int = 44100,
    seed: int = 0,
) -> DatasetSplit:
    """Write a synthetic two-source stem dataset under ``root`` and scan it.

    The two sources occupy disjoint spectral bands (tones below ~750 Hz,
    noise in 4-8 kHz), so ideal-ratio masks are nearly binary and a tiny
    model can learn the task in a few hundred steps.  Stems are stored as
    float32 and the mixture is computed in float32, making additivity exact.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))

    val_names = []
    for part, count in (("train", n_train + n_valid), ("test", n_test)):
        for i in range(count):
            name = f"{part}_track{i:02d}"
            track_dir = root / part / name
            track_dir.mkdir(parents=True, exist_ok=True)
            tonal = _toy_tonal(rng, n, sample_rate).astype(np.float32)
            noise = _toy_noise(rng, n, sample_rate).astype(np.float32)
            mixture = tonal + noise  # float32 sum: additivity holds bit-exactly
            for stem, data in ((TOY_SOURCES[0], tonal), (TOY_SOURCES[1], noise), (MIXTURE_STEM, mixture)):
                save_waveform(
                    track_dir / f"{stem}.wav",
                    Waveform(data.astype(np.float64), sample_rate),
                    encoding="float32",
                )
            if part == "train" and i >= n_train:
                val_names.append(name)

    if val_names:
        (root / "validation.txt").write_text("\n".join(val_names) + "\n", "utf-8")
    return scan_dataset(root)
