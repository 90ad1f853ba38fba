import numpy as np

from medtimeline import sequencer as sq
from medtimeline import tasks as tk
from medtimeline.synthgen import DAY_S


def test_cases_respect_windows(population):
    cfg, records, vocab, bins, seqs = population
    cases = tk.build_cases(records, seqs, cfg)
    assert cases, "population too small to yield cases"
    for c in cases:
        r = records[c.index]
        assert r.patient_id == c.patient_id
        assert any(e.end == c.time for e in r.encounters[1:])
        assert c.time >= r.record_start + 12 * tk.MONTH
        assert c.time + tk.TWO_YEARS <= r.record_end - tk.LAST_EVENT_MARGIN_DAYS * DAY_S
        assert 0.0 <= c.true_probability <= 1.0
        assert np.array_equal(c.prompt, seqs[c.index].until(c.time).tokens)


def test_labels_match_future_diagnoses(population):
    cfg, records, vocab, bins, seqs = population
    for c in tk.build_cases(records, seqs, cfg):
        r = records[c.index]
        future = {code[:3] for e in r.encounters if c.time < e.start <= c.time + tk.TWO_YEARS
                  for code, _ in e.diagnoses}
        assert c.label == ("I21" in future)
        past = {code[:3] for e in r.encounters if e.start <= c.time for code, _ in e.diagnoses}
        assert c.has_condition == ("I50" in past)


def test_prompt_has_no_future_tokens(population):
    cfg, records, vocab, bins, seqs = population
    for c in tk.build_cases(records, seqs, cfg)[:50]:
        seq = seqs[c.index]
        k = len(c.prompt)
        assert np.array_equal(seq.tokens[:k], c.prompt)
        assert seq.times[k - 1] <= c.time < seq.times[-1]
        assert sq.parse_tokens(c.prompt, vocab)[-1].kind == sq.ENCOUNTER_END


def test_true_probability_tracks_condition(population):
    cfg, records, vocab, bins, seqs = population
    cases = tk.build_cases(records, seqs, cfg)
    with_a = [c.true_probability for c in cases if c.has_condition]
    without = [c.true_probability for c in cases if not c.has_condition]
    assert with_a and without
    assert np.mean(with_a) > np.mean(without)


def test_shorter_horizon_admits_more_patients(population):
    cfg, records, vocab, bins, seqs = population
    long = tk.build_cases(records, seqs, cfg)
    short = tk.build_cases(records, seqs, cfg, horizon=365 * DAY_S)
    assert {c.patient_id for c in long} <= {c.patient_id for c in short}
