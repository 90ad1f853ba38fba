"""AdamW training loop with warmup + cosine schedule and a 6ND FLOP ledger."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from . import model as M
from .sequencer import PackedBatch, TokenSequence, pack_sequences

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    # desk defaults; large-scale runs used batch 512 and far longer schedules
    batch_size: int = 32
    steps: int = 2000
    peak_lr: float = 3e-3
    warmup_steps: int = 100
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.steps <= 0 or self.batch_size <= 0:
            raise ValueError("steps and batch_size must be positive")
        if not 0 <= self.warmup_steps <= self.steps:
            raise ValueError("warmup_steps must be within [0, steps]")
        if self.peak_lr <= 0 or self.eps <= 0 or self.clip_norm <= 0 or self.weight_decay < 0:
            raise ValueError("rates must be positive")


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup to the peak, then cosine decay to peak/10 at the final step."""
    if not 0 <= step <= config.steps:
        raise ValueError("step outside the schedule")
    peak, w = config.peak_lr, config.warmup_steps
    if step < w:
        return peak * step / w
    span = config.steps - w
    progress = 1.0 if span == 0 else (step - w) / span
    return peak * (0.1 + 0.45 * (1.0 + math.cos(math.pi * progress)))


def estimate_flops(n_params: float, n_tokens: float) -> float:
    if n_params <= 0 or n_tokens <= 0:
        raise ValueError("N and D must be positive")
    return 6.0 * n_params * n_tokens


@dataclass
class FlopLedger:
    n_params: int
    tokens: int = 0

    @property
    def flops(self) -> float:
        return 6.0 * self.n_params * self.tokens

    @property
    def tflops(self) -> float:
        return self.flops / 1e12


@dataclass
class TrainResult:
    params: dict
    curve: list = field(default_factory=list)  # dicts: step, tokens, loss, lr, flops
    ledger: FlopLedger | None = None
    opt_state: dict = field(default_factory=dict)


class TrainingDiverged(RuntimeError):
    pass


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Scale ``grads`` in place to global norm <= max_norm; returns the pre-clip norm."""
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


class AdamW:
    def __init__(self, params: dict, config: TrainConfig):
        self.c = config
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def update(self, params: dict, grads: dict, lr: float) -> None:
        c = self.c
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for k, p in params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            step = (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            if p.ndim == 2 and c.weight_decay:
                step = step + c.weight_decay * p
            p -= (lr * step).astype(p.dtype)

    def state(self) -> dict:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out


def epoch_batches(
    sequences: Sequence[TokenSequence],
    context_len: int,
    vocab,
    batch_size: int,
    seed: int = 0,
) -> Iterator[PackedBatch]:
    """Endless batches; patients are re-shuffled and re-packed every epoch.

    Packed rows are shuffled before batching, so one batch mixes rows from
    across the epoch instead of a few neighbouring patients.
    """
    if not sequences:
        raise ValueError("no training sequences")
    epoch = 0
    while True:
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(len(sequences))
        packed = list(pack_sequences((sequences[i] for i in order), context_len, vocab, 1024))
        rows = np.concatenate([b.rows for b in packed])
        prov = np.concatenate([b.provenance for b in packed])
        perm = rng.permutation(len(rows))
        for s in range(0, len(rows), batch_size):
            idx = perm[s:s + batch_size]
            yield PackedBatch(rows[idx], prov[idx], rows[idx] != vocab.pad_id)
        epoch += 1


def train(
    params: dict,
    model_config: M.ModelConfig,
    batches: Iterable[PackedBatch],
    config: TrainConfig,
    loss_csv=None,
    diagnostic_path=None,
    callback: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Run ``config.steps`` AdamW steps; ``params`` is updated in place."""
    n_params = M.count_params(model_config)["total"]
    ledger = FlopLedger(n_params)
    opt = AdamW(params, config)
    curve = []
    it = iter(batches)
    writer = None
    fh = None
    if loss_csv is not None:
        fh = open(Path(loss_csv), "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["step", "tokens", "loss", "lr", "flops"])
    try:
        for step in range(1, config.steps + 1):
            batch = next(it)
            loss, grads = M.loss_and_grad(params, model_config, batch.rows, batch.loss_mask)
            if not math.isfinite(loss):
                if diagnostic_path is not None:
                    M.save_checkpoint(diagnostic_path, params, model_config, step=step - 1,
                                      extra={"reason": "non-finite loss", "loss": repr(loss)})
                raise TrainingDiverged(f"non-finite loss at step {step}")
            clip_gradients(grads, config.clip_norm)
            lr = lr_at(step, config)
            opt.update(params, grads, lr)
            ledger.tokens += int(batch.rows.size)
            row = {"step": step, "tokens": ledger.tokens, "loss": loss, "lr": lr, "flops": ledger.flops}
            curve.append(row)
            if writer is not None:
                writer.writerow([step, ledger.tokens, repr(loss), repr(lr), repr(ledger.flops)])
            if callback is not None:
                callback(step, loss)
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(params, curve, ledger, opt.state())


def unigram_entropy(sequences: Iterable[TokenSequence | Sequence[int]], vocab_size: int) -> float:
    """Entropy (nats) of the empirical token distribution."""
    counts = np.zeros(vocab_size, dtype=np.int64)
    for s in sequences:
        toks = s.tokens if isinstance(s, TokenSequence) else s
        counts += np.bincount(np.asarray(toks), minlength=vocab_size)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def smoothed(values: Sequence[float], window: int = 50) -> np.ndarray:
    """Means of consecutive non-overlapping windows."""
    v = np.asarray(values, dtype=np.float64)
    k = len(v) // window
    return v[: k * window].reshape(k, window).mean(1)
