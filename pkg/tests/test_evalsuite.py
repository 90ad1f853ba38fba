import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from medtimeline import evalsuite as ev
from medtimeline import vocab as vb
from oracles import pairwise_auc


def test_rmsle_examples():
    assert ev.rmsle([0.1, 0.2], [0.1, 0.2]) == 0.0
    assert ev.rmsle([0.1], [0.01], eps=1e-12) == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(ValueError):
        ev.rmsle([0.0], [0.1], eps=0.0)
    with pytest.raises(ValueError):
        ev.rmsle([0.1], [0.1, 0.2])


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=30), st.randoms())
def test_rmsle_symmetry_and_order(pairs, rnd):
    x, y = map(list, zip(*pairs))
    assert ev.rmsle(x, y) == ev.rmsle(y, x)
    order = list(range(len(x)))
    rnd.shuffle(order)
    assert ev.rmsle([x[i] for i in order], [y[i] for i in order]) == pytest.approx(ev.rmsle(x, y), rel=1e-12, abs=1e-15)


def test_ece_examples():
    lo = np.array([0.2] * 10)
    hi = np.array([0.8] * 10)
    y_lo = np.array([1, 1, 1] + [0] * 7)
    y_hi = np.array([1] * 7 + [0] * 3)
    curve, ece = ev.calibration_and_ece(np.r_[lo, hi], np.r_[y_lo, y_hi], 2)
    assert ece == pytest.approx(0.1)
    assert [b[2] for b in curve.bins] == [10, 10]
    _, ece = ev.calibration_and_ece([0.25] * 8, [1, 0, 0, 0] * 2, 2)
    assert ece == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ValueError):
        ev.calibration_and_ece([], [], 10)


def test_ece_bins_remainder_to_lowest():
    curve, _ = ev.calibration_and_ece(np.linspace(0, 1, 23), np.zeros(23), 5)
    assert [b[2] for b in curve.bins] == [5, 5, 5, 4, 4]
    means = [b[0] for b in curve.bins]
    assert means == sorted(means)


def test_ece_calibrated_sampling():
    rng = np.random.default_rng(0)
    p = rng.random(100_000)
    y = rng.random(100_000) < p
    _, ece = ev.calibration_and_ece(p, y, 10)
    assert ece < 0.01


def test_auc_examples():
    assert ev.aucroc([0.9, 0.8, 0.3, 0.2], [1, 1, 0, 0]) == 1.0
    assert ev.aucroc([0.9, 0.6, 0.4, 0.2], [1, 0, 1, 0]) == 0.75
    rng = np.random.default_rng(1)
    s = rng.random(10_000)
    assert abs(ev.aucroc(s, rng.permutation(s > 0.5)) - 0.5) <= 0.02
    with pytest.raises(ValueError):
        ev.aucroc([0.1, 0.2], [1, 1])


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 200), st.integers(0, 2 ** 31), st.booleans())
def test_auc_matches_pairwise_counting(n, seed, coarse):
    rng = np.random.default_rng(seed)
    s = rng.integers(0, 5, n) / 4 if coarse else rng.random(n)
    y = rng.random(n) < 0.4
    y[0], y[1] = True, False
    assert ev.aucroc(s, y) == pytest.approx(pairwise_auc(s, y), abs=1e-12)


def test_weighted_auc_equals_replicated():
    rng = np.random.default_rng(2)
    s = rng.integers(0, 6, 40).astype(float)
    y = np.arange(40) % 3 == 0
    w = rng.integers(1, 4, 40)
    rep_s, rep_y = np.repeat(s, w), np.repeat(y, w)
    assert ev.aucroc(s, y, w) == pytest.approx(pairwise_auc(rep_s, rep_y), abs=1e-12)


def test_roc_curve_endpoints():
    pts = ev.roc_curve([0.9, 0.6, 0.4, 0.2], [1, 0, 1, 0])
    assert pts[0][1:] == (0.0, 0.0) and pts[-1][1:] == (1.0, 1.0)


def test_pr_examples():
    truth = [{"A", "B"}, {"C"}]
    perfect = [{"A": 1.0, "B": 1.0}, {"C": 1.0}]
    curve = ev.micro_pr_curve(perfect, truth, thresholds=[0.1, 0.5, 1.0])
    assert all(p == 1 and r == 1 for _, p, r in curve.points)
    assert ev.micro_pr_curve(perfect, truth).auc == pytest.approx(1.0)
    one = ev.micro_pr_curve([{"A": 0.6, "B": 0.4}], [{"A"}], thresholds=[0.5, 0.3])
    assert one.points == ((0.5, 1.0, 1.0), (0.3, 0.5, 1.0))
    with pytest.raises(ValueError):
        ev.micro_pr_curve([{"A": 0.5}], [set()])


def test_pr_duplication_invariance():
    rng = np.random.default_rng(3)
    scores = [{c: float(rng.integers(0, 9) / 8) for c in "ABCDE"} for _ in range(6)]
    truth = [set(rng.choice(list("ABCDE"), 2, replace=False)) for _ in range(6)]
    a = ev.micro_pr_curve(scores, truth)
    b = ev.micro_pr_curve(scores * 2, truth * 2)
    assert a.points == b.points and a.auc == pytest.approx(b.auc)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0.0, 0.5))
def test_pr_auc_monotone_under_improvement(seed, delta):
    rng = np.random.default_rng(seed)
    truth = [set(rng.choice(list("ABCDEF"), 2, replace=False)) for _ in range(5)]
    scores = [{c: float(rng.integers(0, 5) / 4) for c in "ABCDEF"} for _ in range(5)]
    better = [{c: min(1.0, v + delta) if c in t else max(0.0, v - delta) for c, v in sc.items()}
              for sc, t in zip(scores, truth)]
    assert ev.micro_pr_curve(better, truth).auc >= ev.micro_pr_curve(scores, truth).auc - 1e-12


def test_lookback_baseline():
    history = [(1.0, "A"), (5.0, "B"), (8.0, "C")]
    assert ev.lookback_baseline(history, 10.0, 6.0, {"B", "C"}) == (1.0, 1.0)
    assert ev.lookback_baseline([], 10.0, 6.0, {"B"}) == (1.0, 0.0)
    recalls = [ev.lookback_baseline(history, 10.0, w, {"A", "C"})[1] for w in (1, 3, 6, 10, 100)]
    assert recalls == sorted(recalls)
    with pytest.raises(ValueError):
        ev.lookback_baseline(history, 10.0, 0.0, {"A"})


def test_resample_weights():
    w = ev.resample_weights(100, 9900, 500, 9900)
    assert (w.w_pos, w.w_neg) == (0.2, 1.0)
    assert ev.resample_weights(7, 9, 7, 9) == ev.ResampleWeights(1.0, 1.0)
    labels = np.r_[np.ones(500), np.zeros(9900)]
    assert ev.weighted_prevalence(labels, w) == pytest.approx(100 / 10000, rel=1e-15)
    with pytest.raises(ValueError):
        ev.resample_weights(0, 1, 1, 1)


@given(st.integers(1, 10 ** 6), st.integers(1, 10 ** 6), st.integers(1, 10 ** 6), st.integers(1, 10 ** 6))
def test_resample_restores_prevalence(po, no, pr, nr):
    w = ev.resample_weights(po, no, pr, nr)
    restored = w.w_pos * pr / (w.w_pos * pr + w.w_neg * nr)
    assert math.isclose(restored, po / (po + no), rel_tol=1e-13)


def _ids(vocab, *strings):
    return [vocab.id(s) for s in strings]


def test_invalid_event_rates(vocab):
    dx = vb.encode_diagnosis(sorted(vocab.diagnosis_codes)[0])
    lab = next(s for s in vocab.strings if s.startswith("LAB:"))
    proc = next(s for s in vocab.strings if s.startswith("PROC:"))
    valid = _ids(vocab, *dx, lab, "LABQ:3")
    r = ev.invalid_event_rates(valid, vocab)
    assert all(v["rate"] == 0 for v in r.values())
    r = ev.invalid_event_rates(_ids(vocab, lab, proc, lab, "LABQ:3"), vocab)
    assert r["lab"]["rate"] == 0.5 and r["lab"]["initiated"] == 2
    timed = _ids(vocab, "TIME:5-15m", lab, "TIME:1-2h", proc, lab, "LABQ:3", "TIME:5-15m")
    assert ev.invalid_event_rates(timed, vocab) == r


def test_prevalence_and_cooccurrence():
    prev, co = ev.prevalence_and_cooccurrence([{"A"}, set()], ["A"])
    assert prev["A"] == 0.5
    sets = [{"A", "B"}, {"A"}, {"B"}, set()]
    prev, co = ev.prevalence_and_cooccurrence(sets, ["A", "B"])
    assert co[("A", "B")] == 0.25
    assert co[("A", "A")] == prev["A"] and co[("B", "B")] == prev["B"]
    prev, _ = ev.prevalence_and_cooccurrence([[{"A"}, set(), set(), {"A"}]], ["A"])
    assert prev["A"] == 0.5


def test_mae():
    assert ev.mae([1, 2], [1, 2]) == 0
    assert ev.mae([1, 3], [2, 2]) == 1.0
    with pytest.raises(ValueError):
        ev.mae([], [])


@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=1, max_size=20),
       st.floats(-1e3, 1e3))
def test_mae_shift_bound(pairs, c):
    p, t = map(np.array, zip(*pairs))
    assert abs(ev.mae(p + c, t) - ev.mae(p, t)) <= abs(c) + 1e-9


def test_write_metrics(tmp_path):
    rows = [{"metric": "aucroc", "task": "mi", "value": 0.75, "n": 4, "params": {"tau": 730}}]
    ev.write_metrics(tmp_path / "m.csv", tmp_path / "m.json", rows)
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "metric,task,value,n,params"
    assert '"aucroc"' in (tmp_path / "m.json").read_text()
