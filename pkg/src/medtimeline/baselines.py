"""Bag-of-words features and SGD-trained linear / logistic baselines."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

CLASSIFICATION = "classification"
REGRESSION = "regression"


def featurize(tokens, vocab_size: int) -> np.ndarray:
    """Occurrence counts of each token id."""
    t = np.asarray(tokens, dtype=np.int64)
    if t.size and (t.min() < 0 or t.max() >= vocab_size):
        raise ValueError("token id outside the vocabulary")
    return np.bincount(t, minlength=vocab_size).astype(np.float64)


def featurize_many(prompts: Sequence, vocab_size: int) -> np.ndarray:
    return np.stack([featurize(p, vocab_size) for p in prompts]) if len(prompts) else np.zeros((0, vocab_size))


@dataclass(frozen=True)
class BaselineConfig:
    max_epochs: int = 1000
    batch_size: int = 64
    learning_rate: float = 4.0  # max-abs scaled counts are small, so the step is large
    l1: float = 1e-4
    patience: int = 5  # epochs without validation improvement before stopping
    plateau: int = 2  # epochs without improvement before halving the step
    validation_fraction: float = 0.1
    seed: int = 0


@dataclass
class LinearModel:
    kind: str
    weights: np.ndarray  # on max-abs scaled features
    bias: float
    scales: np.ndarray
    history: list = field(default_factory=list)  # validation loss per epoch

    @property
    def raw_weights(self) -> np.ndarray:
        """Weights on unscaled features."""
        return self.weights / self.scales

    def save(self, path) -> None:
        lines = [f"kind {self.kind}", f"dim {len(self.weights)}", f"bias {self.bias!r}"]
        lines.append("scales " + " ".join(f"{i}:{s!r}" for i, s in enumerate(self.scales.tolist()) if s != 1.0))
        lines.append("weights " + " ".join(f"{i}:{w!r}" for i, w in enumerate(self.weights.tolist()) if w != 0.0))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "LinearModel":
        fields = {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            key, _, rest = line.partition(" ")
            fields[key] = rest
        dim = int(fields["dim"])
        scales, weights = np.ones(dim), np.zeros(dim)
        for arr, key in ((scales, "scales"), (weights, "weights")):
            for item in fields.get(key, "").split():
                i, v = item.split(":")
                arr[int(i)] = float(v)
        return cls(fields["kind"], weights, float(fields["bias"]), scales)


def _loss(kind, z, y) -> float:
    if kind == CLASSIFICATION:
        return float(np.mean(np.logaddexp(0.0, z) - y * z))
    return float(np.mean((z - y) ** 2) / 2)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def fit(features, labels, kind: str = CLASSIFICATION, config: BaselineConfig = BaselineConfig(),
        validation=None) -> LinearModel:
    """Minibatch SGD with an L1 proximal step, early stopping on validation loss.

    Without an explicit ``validation`` pair a seeded fraction of the rows is
    held out. The returned weights are those of the best validation epoch.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0 or len(X) != len(y):
        raise ValueError("need a nonempty 2-D feature matrix matching the labels")
    if kind not in (CLASSIFICATION, REGRESSION):
        raise ValueError(f"unknown task kind {kind!r}")
    if kind == CLASSIFICATION:
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("classification labels must be binary")
        if y.min() == y.max():
            raise ValueError("classification needs both classes")
    rng = np.random.default_rng(config.seed)
    if validation is None:
        order = rng.permutation(len(X))
        n_val = int(round(config.validation_fraction * len(X)))
        n_val = min(max(n_val, 1), len(X) - 1) if len(X) > 1 else 0
        val_idx, tr_idx = order[:n_val], order[n_val:]
        Xv, yv = X[val_idx], y[val_idx]
        X, y = X[tr_idx], y[tr_idx]
    else:
        Xv, yv = (np.asarray(a, dtype=np.float64) for a in validation)
    if len(Xv) == 0:
        Xv, yv = X, y

    scales = np.abs(X).max(axis=0)
    scales[scales == 0] = 1.0
    Xs, Xvs = X / scales, Xv / scales

    w = np.zeros(X.shape[1])
    b = float(math.log(y.mean() / (1 - y.mean()))) if kind == CLASSIFICATION else float(y.mean())
    lr = config.learning_rate
    best = (math.inf, w.copy(), b)
    since_best = 0
    history = []
    for _ in range(config.max_epochs):
        order = rng.permutation(len(Xs))
        for s in range(0, len(order), config.batch_size):
            idx = order[s:s + config.batch_size]
            z = Xs[idx] @ w + b
            r = (_sigmoid(z) if kind == CLASSIFICATION else z) - y[idx]
            w -= lr * (Xs[idx].T @ r) / len(idx)
            b -= lr * float(r.mean())
            if config.l1:
                w = np.sign(w) * np.maximum(np.abs(w) - lr * config.l1, 0.0)
        val = _loss(kind, Xvs @ w + b, yv) + config.l1 * float(np.abs(w).sum())
        history.append(val)
        if val < best[0] - 1e-12:
            best = (val, w.copy(), b)
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break
            if since_best % config.plateau == 0:
                lr /= 2
    _, w, b = best
    return LinearModel(kind, w, b, scales, history)


def predict(model: LinearModel, features) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    if X.shape[-1] != len(model.weights):
        raise ValueError("feature length does not match the model")
    z = (X / model.scales) @ model.weights + model.bias
    return _sigmoid(z) if model.kind == CLASSIFICATION else z
