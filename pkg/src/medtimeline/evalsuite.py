"""Evaluation metrics: calibration, discrimination, PR curves, rate agreement and event validity."""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass
from itertools import combinations_with_replacement
from typing import Callable, Hashable, Iterable, Mapping, Sequence

import numpy as np

from .sequencer import DIAGNOSIS, ENCOUNTER_START, LAB, MEDICATION, PROCEDURE, parse_tokens

# ---------------------------------------------------------------------------
# rate agreement


def rmsle(truth, generated, eps: float = 1e-4) -> float:
    """sqrt(mean((log10(x + eps) - log10(xhat + eps))^2))."""
    x = np.asarray(truth, dtype=np.float64)
    y = np.asarray(generated, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("rate vectors differ in length")
    if x.size == 0:
        raise ValueError("empty rate vectors")
    if np.any(x < 0) or np.any(y < 0):
        raise ValueError("rates must be nonnegative")
    if eps <= 0 and (np.any(x == 0) or np.any(y == 0)):
        raise ValueError("eps must be positive when a rate is zero")
    diff = np.log10(x + eps) - np.log10(y + eps)
    return float(np.sqrt(np.mean(diff * diff)))


def prevalence_and_cooccurrence(
    event_sets: Sequence,
    concepts: Sequence[Hashable],
) -> tuple[dict, dict]:
    """Fraction of patients with each concept and with each unordered pair.

    Each element of ``event_sets`` is one patient: either a set of concepts
    or a list of sets (several generations), which is averaged.
    """
    concepts = list(concepts)
    idx = {c: i for i, c in enumerate(concepts)}
    k = len(concepts)
    ind_sum = np.zeros(k)
    pair_sum = np.zeros((k, k))
    n = 0
    for item in event_sets:
        gens = [item] if isinstance(item, (set, frozenset)) else list(item)
        if not gens:
            continue
        ind = np.zeros((len(gens), k))
        for g, s in enumerate(gens):
            for c in s:
                i = idx.get(c)
                if i is not None:
                    ind[g, i] = 1.0
        ind_sum += ind.mean(0)
        pair_sum += ind.T @ ind / len(gens)
        n += 1
    if n == 0:
        return {c: 0.0 for c in concepts}, {}
    prev = {c: ind_sum[i] / n for c, i in idx.items()}
    co = {(a, b): pair_sum[idx[a], idx[b]] / n for a, b in combinations_with_replacement(concepts, 2)}
    return prev, co


def event_concepts(events) -> set:
    """Concept labels for parsed events; diagnoses collapse to their 3-character category."""
    out = set()
    for ev in events:
        if not ev.valid:
            continue
        if ev.kind == DIAGNOSIS:
            out.add(f"DX:{ev.value[:3]}")
        elif ev.kind == MEDICATION:
            out.add(f"MED:{ev.value}")
        elif ev.kind == LAB:
            out.add(f"LAB:{ev.value[0]}")
        elif ev.kind == PROCEDURE:
            out.add(f"PROC:{ev.value}")
    return out


# ---------------------------------------------------------------------------
# calibration


@dataclass(frozen=True)
class CalibrationCurve:
    bins: tuple  # (mean predicted, observed positive fraction, count)


def calibration_and_ece(predictions, labels, n_bins: int = 10) -> tuple[CalibrationCurve, float]:
    """Equal-count quantile bins (remainder to the lowest bins) and count-weighted ECE."""
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.size == 0:
        raise ValueError("empty input")
    if p.shape != y.shape:
        raise ValueError("predictions and labels differ in length")
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    if np.any((p < 0) | (p > 1)):
        raise ValueError("predictions must lie in [0, 1]")
    order = np.argsort(p, kind="stable")
    p, y = p[order], y[order]
    n = p.size
    k = min(n_bins, n)
    sizes = np.full(k, n // k)
    sizes[: n % k] += 1
    bins, ece, pos = [], 0.0, 0
    for size in sizes:
        sl = slice(pos, pos + size)
        mp, fp = float(p[sl].mean()), float(y[sl].mean())
        bins.append((mp, fp, int(size)))
        ece += size / n * abs(mp - fp)
        pos += size
    return CalibrationCurve(tuple(bins)), float(ece)


# ---------------------------------------------------------------------------
# discrimination


def aucroc(scores, labels, weights=None) -> float:
    """P(random positive outranks random negative), ties 1/2, pairs weighted by w_i * w_j."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    w = np.ones_like(s) if weights is None else np.asarray(weights, dtype=np.float64)
    if not (s.shape == y.shape == w.shape):
        raise ValueError("inputs differ in length")
    wp_tot, wn_tot = w[y].sum(), w[~y].sum()
    if wp_tot <= 0 or wn_tot <= 0:
        raise ValueError("both classes must be present")
    uniq, inv = np.unique(s, return_inverse=True)
    wp = np.bincount(inv, weights=w * y, minlength=len(uniq))
    wn = np.bincount(inv, weights=w * ~y, minlength=len(uniq))
    below = np.concatenate([[0.0], np.cumsum(wn)[:-1]])
    return float((wp * (below + 0.5 * wn)).sum() / (wp_tot * wn_tot))


def permuted_label_auc(scores, labels, n_permutations: int = 20, seed: int = 0) -> float:
    """Mean AUCROC over random label permutations (null control)."""
    rng = np.random.default_rng(seed)
    y = np.asarray(labels)
    return float(np.mean([aucroc(scores, rng.permutation(y)) for _ in range(n_permutations)]))


def roc_curve(scores, labels) -> list[tuple[float, float, float]]:
    """(threshold, fpr, tpr) points for predicted-positive = score >= threshold."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    P, N = y.sum(), (~y).sum()
    pts = [(math.inf, 0.0, 0.0)]
    for th in np.unique(s)[::-1]:
        pred = s >= th
        pts.append((float(th), float((pred & ~y).sum() / N) if N else 0.0, float((pred & y).sum() / P) if P else 0.0))
    return pts


# ---------------------------------------------------------------------------
# set prediction


@dataclass(frozen=True)
class PRCurve:
    points: tuple  # (threshold, precision, recall)
    auc: float


def _pr_counts(scores: Sequence[Mapping], truths: Sequence[set], theta: float) -> tuple[int, int, int]:
    tp = fp = fn = 0
    for sc, truth in zip(scores, truths):
        pred = {c for c, v in sc.items() if v >= theta}
        hit = len(pred & truth)
        tp += hit
        fp += len(pred) - hit
        fn += len(truth) - hit
    return tp, fp, fn


def micro_pr_curve(scores: Sequence[Mapping], truths: Sequence[set], thresholds=None) -> PRCurve:
    """Micro-averaged precision/recall over encounters and trapezoid PR-AUC.

    ``scores[i]`` maps each candidate event to its score (fraction of
    generations containing it). Default thresholds are the distinct scores
    plus +inf, the last of which gives the zero-prediction point
    (precision 1 by convention, recall 0).
    """
    truths = [set(t) for t in truths]
    if len(scores) != len(truths):
        raise ValueError("scores and truths differ in length")
    if sum(len(t) for t in truths) == 0:
        raise ValueError("no true events")
    if any(v < 0 or v > 1 for sc in scores for v in sc.values()):
        raise ValueError("scores must lie in [0, 1]")
    if thresholds is None:
        thresholds = sorted({v for sc in scores for v in sc.values()} | {math.inf})
    points = []
    for th in thresholds:
        tp, fp, fn = _pr_counts(scores, truths, th)
        precision = tp / (tp + fp) if tp + fp else 1.0
        recall = tp / (tp + fn)
        points.append((float(th), precision, recall))
    ordered = sorted(points, key=lambda p: (p[2], -p[1]))
    auc = 0.0
    for (_, p0, r0), (_, p1, r1) in zip(ordered, ordered[1:]):
        auc += (r1 - r0) * (p0 + p1) / 2
    return PRCurve(tuple(points), float(auc))


def lookback_baseline(history: Iterable[tuple[float, Hashable]], target_time: float, window: float,
                      truth: set) -> tuple[float, float]:
    """Predict every event seen in [target_time - window, target_time); returns (precision, recall).

    With no predictions precision is 1; with an empty truth recall is 1.
    """
    if window <= 0:
        raise ValueError("window must be positive")
    pred = {e for t, e in history if target_time - window <= t < target_time}
    hit = len(pred & set(truth))
    precision = hit / len(pred) if pred else 1.0
    recall = hit / len(truth) if truth else 1.0
    return precision, recall


# ---------------------------------------------------------------------------
# resampling


@dataclass(frozen=True)
class ResampleWeights:
    w_pos: float
    w_neg: float


def resample_weights(pos_original, neg_original, pos_resampled, neg_resampled) -> ResampleWeights:
    counts = (pos_original, neg_original, pos_resampled, neg_resampled)
    if any(c <= 0 for c in counts):
        raise ValueError("all counts must be positive")
    return ResampleWeights(pos_original / pos_resampled, neg_original / neg_resampled)


def weighted_prevalence(labels, weights: ResampleWeights) -> float:
    y = np.asarray(labels).astype(bool)
    wp = weights.w_pos * y.sum()
    return float(wp / (wp + weights.w_neg * (~y).sum()))


# ---------------------------------------------------------------------------
# validity

FAMILIES = {DIAGNOSIS: "diagnosis", MEDICATION: "medication", LAB: "lab", ENCOUNTER_START: "encounter"}


def invalid_event_rates(tokens, vocab, open_encounters=()) -> dict:
    """Per family: invalid events / events initiated, with the raw counts."""
    started: Counter = Counter()
    invalid: Counter = Counter()
    for ev in parse_tokens(tokens, vocab, open_encounters):
        fam = FAMILIES.get(ev.kind)
        if fam is None:
            continue
        started[fam] += 1
        invalid[fam] += not ev.valid
    return {
        fam: {"rate": invalid[fam] / started[fam] if started[fam] else 0.0,
              "invalid": invalid[fam], "initiated": started[fam]}
        for fam in FAMILIES.values()
    }


# ---------------------------------------------------------------------------
# misc


def mae(predictions, truths) -> float:
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    if p.size == 0:
        raise ValueError("empty input")
    if p.shape != t.shape:
        raise ValueError("inputs differ in length")
    return float(np.mean(np.abs(p - t)))


def bootstrap_interval(metric: Callable, *arrays, n_resamples: int = 1000, alpha: float = 0.05,
                       seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap interval of ``metric(*arrays)`` over resampled rows."""
    arrays = [np.asarray(a) for a in arrays]
    n = len(arrays[0])
    rng = np.random.default_rng(seed)
    stats = []
    for _ in range(n_resamples):
        idx = rng.integers(0, n, n)
        try:
            stats.append(metric(*(a[idx] for a in arrays)))
        except ValueError:
            continue  # resample lost a class
    lo, hi = np.percentile(stats, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return float(lo), float(hi)


def write_metrics(csv_path, json_path, rows: Sequence[Mapping]) -> None:
    """Rows with keys metric, task, value, n, params; written as CSV and as a JSON summary."""
    fields = ["metric", "task", "value", "n", "params"]
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for r in rows:
            w.writerow([r["metric"], r["task"], repr(r["value"]), r.get("n", ""), json.dumps(r.get("params", {}), sort_keys=True)])
    with open(json_path, "w") as fh:
        json.dump(list(rows), fh, indent=2, sort_keys=True, default=float)


def write_curve(path, header: Sequence[str], points: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for p in points:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in p])
