import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from medtimeline import vocab as vb
from medtimeline.vocab import MINUTE, MONTH, TokenKind

TABLE = vb.TimeBucketTable()


def _stats():
    return vb.CorpusStats(
        diagnoses=Counter({"E11.9": 4, "I50.9": 2, "T82.310": 1}),
        medications=Counter({"C10AA05": 3, "A10BA02": 1}),
        labs=Counter({("2160-0", "mg/dL"): 5}),
        procedures=Counter({"A": 5, "B": 3, "C": 1}),
        encounter_types=Counter({"office": 3, "emergency": 1}),
        departments=Counter({"Cardiology": 2}),
        complaints=Counter({"Chest Pain": 1}),
        locations=Counter({"Chest": 1}),
    )


@pytest.mark.parametrize("code,parts", [
    ("I50", ["DX1:I50"]),
    ("E11.9", ["DX1:E11", "DX2:9"]),
    ("T82.310", ["DX1:T82", "DX2:31", "DX3:0"]),
])
def test_encode_diagnosis(code, parts):
    assert vb.encode_diagnosis(code) == parts
    assert vb.decode_diagnosis(parts) == code


@pytest.mark.parametrize("code,parts", [
    ("C10AA05", ["MED1:C10", "MED2:AA", "MED3:05"]),
    ("A10BA02", ["MED1:A10", "MED2:BA", "MED3:02"]),
])
def test_encode_medication(code, parts):
    assert vb.encode_medication(code) == parts
    assert vb.decode_medication(parts) == code


def test_malformed_codes_map_to_unknown(caplog):
    assert vb.encode_diagnosis("not a code") == [vb.UNK]
    assert vb.encode_medication("C10A") == [vb.UNK]
    assert "malformed" in caplog.text


_icd = st.builds(
    lambda a, b, tail: a + b + ("." + tail if tail else ""),
    st.sampled_from("ABCDEFGHIJKLMNOPQRSTUVWXYZ"),
    st.text("0123456789", min_size=2, max_size=2),
    st.text("0123456789ABX", min_size=0, max_size=4),
)


@given(_icd)
def test_diagnosis_bijection(code):
    parts = vb.encode_diagnosis(code)
    assert 1 <= len(parts) <= 3
    assert vb.decode_diagnosis(parts) == code


@given(st.from_regex(r"\A[A-Z][0-9]{2}[A-Z]{2}[0-9]{2}\Z"))
def test_medication_bijection(code):
    parts = vb.encode_medication(code)
    assert len(parts) == 3 and vb.decode_medication(parts) == code


def test_fit_lab_bins_linear_deciles():
    bins = vb.fit_lab_bins(("L", "u", float(v)) for v in range(1, 101))
    cuts = bins.cuts[("L", "u")]
    np.testing.assert_allclose(cuts, [10.9, 20.8, 30.7, 40.6, 50.5, 60.4, 70.3, 80.2, 90.1])
    assert bins.assign("L", "u", 5) == 1
    assert bins.assign("L", "u", 95) == 10
    assert bins.assign("L", "u", -1e9) == 1 and bins.assign("L", "u", 1e9) == 10
    assert bins.assign("other", "u", 1.0) is None


def test_fit_lab_bins_degenerate():
    bins = vb.fit_lab_bins([("L", "u", 7.0)] * 20)
    assert np.all(bins.cuts[("L", "u")] == 7.0)
    assert bins.assign("L", "u", 7.0) == 1


def test_fit_lab_bins_skips_rare_pairs(caplog):
    bins = vb.fit_lab_bins([("L", "u", float(i)) for i in range(9)])
    assert ("L", "u") not in bins


@settings(max_examples=50)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=10, max_size=400, unique=True))
def test_decile_mass(values):
    bins = vb.fit_lab_bins(("L", "u", v) for v in values)
    counts = Counter(bins.assign("L", "u", v) for v in values)
    n = len(values)
    for b in range(1, 11):
        assert n // 10 - 1 <= counts.get(b, 0) <= math.ceil(n / 10) + 1


def test_binning_text_roundtrip():
    bins = vb.fit_lab_bins(("L", "u", float(v)) for v in range(1, 101))
    again = vb.QuantileBinning.loads(bins.dumps())
    np.testing.assert_array_equal(again.cuts[("L", "u")], bins.cuts[("L", "u")])


def test_encode_gap_examples():
    assert vb.encode_gap(30, TABLE) == []
    assert vb.encode_gap(4 * MINUTE, TABLE) == ["TIME:1-5m"]
    assert vb.encode_gap(20 * MONTH, TABLE) == ["TIME:6mo"] * 3
    with pytest.raises(ValueError, match="non-chronological"):
        vb.encode_gap(-1, TABLE)


def test_decode_gap_examples():
    custom = vb.TimeBucketTable([("a", 4 * MINUTE, 9 * MINUTE)] + [
        (f"b{i}", 9 * MINUTE * 2 ** i, 9 * MINUTE * 2 ** (i + 1)) for i in range(11)
    ] + [("top", 9 * MINUTE * 2 ** 11, math.inf)])
    assert vb.decode_gap("TIME:a", custom) == pytest.approx(6 * MINUTE)
    assert vb.decode_gap("DX1:I50", TABLE) == 0.0
    assert vb.decode_gap("TIME:6mo", TABLE) == pytest.approx(6 * MONTH)


def test_time_table_validation():
    with pytest.raises(ValueError):
        vb.TimeBucketTable(vb.DEFAULT_BUCKETS[:-1])
    broken = list(vb.DEFAULT_BUCKETS)
    broken[3] = ("x", 1.5 * 3600, 2 * 3600)
    with pytest.raises(ValueError):
        vb.TimeBucketTable(broken)


@given(st.floats(0, 5 * 365 * 86400, allow_nan=False), st.floats(0, 5 * 365 * 86400, allow_nan=False))
def test_gap_count_monotone(g1, g2):
    lo, hi = sorted((g1, g2))
    assert len(vb.encode_gap(lo, TABLE)) <= len(vb.encode_gap(hi, TABLE))


@given(st.floats(MINUTE, 6 * MONTH, exclude_max=True, allow_nan=False))
def test_decoded_gap_within_bucket(g):
    toks = vb.encode_gap(g, TABLE)
    b = TABLE.bucket_of(g)
    total = sum(vb.decode_gap(t, TABLE) for t in toks)
    assert b.lower <= total <= b.upper


def test_build_vocabulary_top_k_and_errors():
    v = vb.build_vocabulary(_stats(), vb.VocabConfig(max_procedures=2))
    assert "PROC:A" in v and "PROC:B" in v and "PROC:C" not in v
    with pytest.raises(ValueError, match="no events observed"):
        vb.build_vocabulary(vb.CorpusStats())


def test_time_tokens_unconditional():
    v = vb.build_vocabulary(_stats())
    assert len(v.ids_of_kind(TokenKind.TIME)) == 13


def test_vocabulary_deterministic_and_tagged(tmp_path):
    a = vb.build_vocabulary(_stats())
    b = vb.build_vocabulary(_stats())
    assert a.dumps().encode() == b.dumps().encode()
    assert a.hash() == b.hash()
    assert len(set(a.strings)) == len(a)
    # every string is owned by exactly one kind
    for s, k in zip(a.strings, a.kinds):
        if k in vb.SPECIAL:
            assert s == vb.SPECIAL[k]
        else:
            assert s.startswith(vb.PREFIX[k])
    a.save(tmp_path)
    again = vb.Vocabulary.load(tmp_path)
    assert again.dumps() == a.dumps()
    assert again.diagnosis_codes == a.diagnosis_codes


def test_time_deltas():
    v = vb.build_vocabulary(_stats())
    deltas = v.time_deltas(TABLE)
    assert deltas[v.id("TIME:6mo")] == pytest.approx(6 * MONTH)
    assert deltas[v.id("DX1:I50")] == 0.0


def test_age_and_year_buckets():
    assert vb.age_bucket(18) == "18-22"
    assert vb.age_bucket(10) == "18-22"
    assert vb.age_bucket(64.9) == "63-67"
    assert vb.year_bucket(44) == "40-44"
