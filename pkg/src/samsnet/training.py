"""Training: the reconstruction objective and the optimization loop.

The default objective is the time-domain squared l2 norm between each
target source and its mask-based reconstruction through the mixture phase;
a magnitude-domain variant is available to skip the ISTFT in the inner
loop.  One "epoch" draws a single random excerpt from every training track
(each a separate optimizer step), validates on fixed seeded excerpts, keeps
the best-validation checkpoint, and stops early after ``patience`` epochs
without improvement.

Per-epoch RNG streams are derived from (seed, epoch), so a run resumed from
a checkpoint sees exactly the data an uninterrupted run would have seen.
"""

from __future__ import annotations

import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import DatasetSplit, Excerpt, StemTrack, augment_sources, load_track, random_excerpt
from .model import ModelConfig, SamsNet, load_checkpoint, save_checkpoint
from .optim import Adam
from .stft import ComplexSpectrogram, FrameParams, Waveform, masked_istft, stft
from .tensor import NonFiniteError, Tape, Tensor, add, mul, sub, tsum

__all__ = ["TrainConfig", "TrainResult", "compute_loss", "train_loop", "save_checkpoint", "load_checkpoint"]

LOSS_DOMAINS = ("time", "magnitude")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_epochs: int = 1000
    max_steps: int | None = None
    patience: int = 140
    excerpt_seconds: float = 6.0
    loss_domain: str = "time"
    augment: bool = True
    seed: int = 0
    frame: FrameParams = field(default_factory=FrameParams)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.loss_domain not in LOSS_DOMAINS:
            raise ValueError(f"loss_domain must be one of {LOSS_DOMAINS}")
        if self.excerpt_seconds <= 0:
            raise ValueError("excerpt_seconds must be positive")


@dataclass
class TrainResult:
    best_val_loss: float
    best_epoch: int
    epochs_run: int
    steps_run: int
    history: list[tuple[int, float, float, float]]  # epoch, train, val, wall seconds
    checkpoint_path: Path | None


def compute_loss(
    masks: Sequence[Tensor],
    mix_spec: ComplexSpectrogram,
    targets: Sequence[Waveform],
    domain: str = "time",
) -> Tensor:
    """Sum over sources of the squared l2 reconstruction error.

    ``time``: || s_i - istft(|X| * M_i, phase(X)) ||^2 in the sample domain,
    differentiable through the linear ISTFT chain.
    ``magnitude``: || |S_i| - M_i * |X| ||^2 in the spectrogram domain.
    """
    if len(masks) != len(targets):
        raise ValueError(f"{len(masks)} masks for {len(targets)} targets")
    if domain not in LOSS_DOMAINS:
        raise ValueError(f"unknown loss domain {domain!r}")
    total: Tensor | None = None
    for mask, target in zip(masks, targets):
        if domain == "time":
            n = target.n_samples
            est = masked_istft(mask, mix_spec, n)
            ref = Tensor(target.samples.astype(mask.dtype))
            if est.shape != ref.shape:
                raise ValueError(f"reconstruction {est.shape} vs target {ref.shape}")
            diff = sub(est, ref)
        else:
            target_mag = stft(target, mix_spec.params).magnitude
            mix_mag = Tensor(mix_spec.magnitude.astype(mask.dtype))
            diff = sub(mul(mask, mix_mag), Tensor(target_mag.astype(mask.dtype)))
        term = tsum(mul(diff, diff))
        total = term if total is None else add(total, term)
    assert total is not None
    return total


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng((seed, epoch))


def _validation_excerpts(split: DatasetSplit, source: str, cfg: TrainConfig) -> list[tuple[Excerpt, StemTrack]]:
    rng = _epoch_rng(cfg.seed, 0x5EED)
    out = []
    for handle in split.valid:
        track = load_track(handle)
        out.append((random_excerpt(track, cfg.excerpt_seconds, rng), track))
    return out


def _excerpt_loss_value(model: SamsNet, excerpt: Excerpt, source: str, cfg: TrainConfig) -> float:
    """Forward-only loss of one excerpt (no tape, no augmentation)."""
    spec = stft(excerpt.mixture, cfg.frame)
    mag = Tensor(spec.magnitude.astype(model.dtype))
    mask = model.forward(mag)
    loss = compute_loss([mask], spec, [excerpt.sources[source]], domain=cfg.loss_domain)
    return loss.item()


def train_loop(
    model: SamsNet,
    split: DatasetSplit,
    source: str,
    cfg: TrainConfig,
    checkpoint_path=None,
    log_path=None,
    optimizer: Adam | None = None,
    start_epoch: int = 0,
    quiet: bool = True,
) -> TrainResult:
    """Optimize ``model`` to isolate ``source``; returns the best-checkpoint stats.

    The training log (one line per epoch: epoch, train loss, validation
    loss, wall seconds) is appended to ``log_path`` when given.
    """
    if not split.train:
        raise ValueError("training split is empty")
    if not split.valid:
        raise ValueError("validation split is empty (supply a validation tracklist)")
    if source not in split.sources:
        raise ValueError(f"source '{source}' not in dataset sources {split.sources}")

    if optimizer is None:
        optimizer = Adam(
            [p for _, p in model.parameters()],
            lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps,
        )
    val_excerpts = _validation_excerpts(split, source, cfg)

    best_val = np.inf
    best_epoch = -1
    steps = 0
    history: list[tuple[int, float, float, float]] = []
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    ckpt = Path(checkpoint_path) if checkpoint_path else None

    try:
        epoch = start_epoch
        while epoch < cfg.max_epochs:
            t0 = time.monotonic()
            rng = _epoch_rng(cfg.seed, epoch)
            train_losses = []
            for handle in split.train:
                track = load_track(handle)
                excerpt = random_excerpt(track, cfg.excerpt_seconds, rng)
                sources = excerpt.sources
                if cfg.augment:
                    sources, mixture = augment_sources(sources, rng)
                else:
                    mixture = excerpt.mixture

                spec = stft(mixture, cfg.frame)
                mag = Tensor(spec.magnitude.astype(model.dtype))
                optimizer.zero_grad()
                try:
                    with Tape() as tape:
                        mask = model.forward(mag)
                        loss = compute_loss([mask], spec, [sources[source]], domain=cfg.loss_domain)
                    tape.backward(loss)
                except NonFiniteError as exc:
                    raise NonFiniteError(
                        f"epoch {epoch}, track '{handle.name}', step {steps}: {exc}"
                    ) from exc
                optimizer.step()
                steps += 1
                train_losses.append(loss.item())
                if cfg.max_steps is not None and steps >= cfg.max_steps:
                    break

            val_loss = float(
                np.mean([_excerpt_loss_value(model, e, source, cfg) for e, _ in val_excerpts])
            )
            train_loss = float(np.mean(train_losses))
            wall = time.monotonic() - t0
            history.append((epoch, train_loss, val_loss, wall))
            if log_fh:
                log_fh.write(f"{epoch}\t{train_loss:.6e}\t{val_loss:.6e}\t{wall:.2f}\n")
                log_fh.flush()
            if not quiet:
                print(f"[{source}] epoch {epoch}: train {train_loss:.4e} val {val_loss:.4e}", file=sys.stderr)

            if val_loss < best_val:
                best_val = val_loss
                best_epoch = epoch
                if ckpt:
                    save_checkpoint(
                        ckpt, model, optimizer=optimizer,
                        meta={"source": source, "epoch": epoch, "val_loss": val_loss},
                    )

            epoch += 1
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
            if epoch - best_epoch > cfg.patience:
                break
    finally:
        if log_fh:
            log_fh.close()

    if ckpt and best_epoch < 0:
        save_checkpoint(ckpt, model, optimizer=optimizer, meta={"source": source, "epoch": start_epoch})
    return TrainResult(
        best_val_loss=float(best_val),
        best_epoch=best_epoch,
        epochs_run=len(history),
        steps_run=steps,
        history=history,
        checkpoint_path=ckpt,
    )
