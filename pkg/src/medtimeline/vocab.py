"""Closed token vocabulary, event grammar pieces, lab deciles and time buckets.

Every token string carries a kind prefix (``DX2:31``, ``MED1:C10``, ...), so a
string never belongs to two kinds and generated streams can be parsed back
into events without ambiguity.
"""

from __future__ import annotations

import enum
import hashlib
import logging
import math
import re
from bisect import bisect_left, bisect_right
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

MINUTE = 60.0
HOUR = 3600.0
DAY = 86400.0
MONTH = 365.25 * DAY / 12
SIX_MONTHS = 6 * MONTH

PAD = "[PAD]"
UNK = "[UNK]"
SEP = "[SEP]"
BOS = "[BOS]"

SEX_CATEGORIES = ("Male", "Female", "Unknown", "Masked", "Other", "Unspecified")
RACE_CATEGORIES = (
    "White",
    "Black or African American",
    "Asian",
    "American Indian or Alaska Native",
    "Native Hawaiian or Other Pacific Islander",
    "Other",
    "Unknown",
)
UNSPECIFIED_DEPARTMENT = "unspecified"


class TokenKind(enum.Enum):
    PAD = "pad"
    UNK = "unk"
    SEP = "sep"
    BOS = "bos"
    SEX = "sex"
    RACE = "race"
    AGE = "age"
    YEAR = "year"
    ENC_START = "enc_start"
    ENC_END = "enc_end"
    DEPT = "dept"
    CC_NAME = "cc_name"
    CC_LOC = "cc_loc"
    DX1 = "dx1"
    DX2 = "dx2"
    DX3 = "dx3"
    LAB = "lab"
    LAB_Q = "lab_q"
    MED1 = "med1"
    MED2 = "med2"
    MED3 = "med3"
    PROC = "proc"
    TIME = "time"


# one prefix per kind; special tokens have fixed strings instead
PREFIX = {
    TokenKind.SEX: "SEX:",
    TokenKind.RACE: "RACE:",
    TokenKind.AGE: "AGE:",
    TokenKind.YEAR: "YEAR:",
    TokenKind.ENC_START: "START:",
    TokenKind.ENC_END: "END:",
    TokenKind.DEPT: "DEPT:",
    TokenKind.CC_NAME: "CC:",
    TokenKind.CC_LOC: "CCLOC:",
    TokenKind.DX1: "DX1:",
    TokenKind.DX2: "DX2:",
    TokenKind.DX3: "DX3:",
    TokenKind.LAB: "LAB:",
    TokenKind.LAB_Q: "LABQ:",
    TokenKind.MED1: "MED1:",
    TokenKind.MED2: "MED2:",
    TokenKind.MED3: "MED3:",
    TokenKind.PROC: "PROC:",
    TokenKind.TIME: "TIME:",
}
SPECIAL = {TokenKind.PAD: PAD, TokenKind.UNK: UNK, TokenKind.SEP: SEP, TokenKind.BOS: BOS}

_KIND_ORDER = list(TokenKind)

ICD_PATTERN = re.compile(r"^[A-Z][0-9A-Z]{2}(\.?[0-9A-Z]{1,4})?$")
ATC_PATTERN = re.compile(r"^[A-Z][0-9]{2}[A-Z]{2}[0-9]{2}$")


def token(kind: TokenKind, payload: str = "") -> str:
    if kind in SPECIAL:
        return SPECIAL[kind]
    return PREFIX[kind] + payload


def payload_of(tok: str) -> str:
    return tok.split(":", 1)[1] if ":" in tok else ""


def lab_key(component: str, unit: str) -> str:
    return f"{component}|{unit}"


# ---------------------------------------------------------------------------
# Code splitting


def encode_diagnosis(code: str) -> list[str]:
    """Split an ICD-10-CM code into 1-3 position-tagged tokens.

    ``"T82.310"`` becomes ``["DX1:T82", "DX2:31", "DX3:0"]``. A malformed code
    yields ``[UNK]`` and a logged diagnostic.
    """
    if not isinstance(code, str) or not ICD_PATTERN.match(code):
        logger.warning("malformed ICD-10-CM code %r", code)
        return [UNK]
    flat = code.replace(".", "")
    parts = [token(TokenKind.DX1, flat[:3])]
    if len(flat) > 3:
        parts.append(token(TokenKind.DX2, flat[3:5]))
    if len(flat) > 5:
        parts.append(token(TokenKind.DX3, flat[5:7]))
    return parts


def decode_diagnosis(parts: Sequence[str]) -> str:
    """Inverse of :func:`encode_diagnosis`; returns the dotted code."""
    pieces = [payload_of(p) for p in parts]
    head = pieces[0]
    tail = "".join(pieces[1:])
    return f"{head}.{tail}" if tail else head


def canonical_icd(code: str) -> str:
    flat = code.replace(".", "")
    return flat[:3] + ("." + flat[3:] if len(flat) > 3 else "")


def encode_medication(code: str) -> list[str]:
    """Split a 7-character ATC code into three position-tagged tokens."""
    if not isinstance(code, str) or len(code) != 7:
        logger.warning("malformed ATC code %r", code)
        return [UNK]
    return [
        token(TokenKind.MED1, code[:3]),
        token(TokenKind.MED2, code[3:5]),
        token(TokenKind.MED3, code[5:7]),
    ]


def decode_medication(parts: Sequence[str]) -> str:
    return "".join(payload_of(p) for p in parts)


# ---------------------------------------------------------------------------
# Time buckets


@dataclass(frozen=True)
class TimeBucket:
    label: str
    lower: float
    upper: float  # math.inf for the repeatable top bucket

    @property
    def repeatable(self) -> bool:
        return math.isinf(self.upper)


DEFAULT_BUCKETS = (
    ("1-5m", 1 * MINUTE, 5 * MINUTE),
    ("5-15m", 5 * MINUTE, 15 * MINUTE),
    ("15m-1h", 15 * MINUTE, HOUR),
    ("1-2h", HOUR, 2 * HOUR),
    ("2-6h", 2 * HOUR, 6 * HOUR),
    ("6-12h", 6 * HOUR, 12 * HOUR),
    ("12h-1d", 12 * HOUR, DAY),
    ("1-3d", DAY, 3 * DAY),
    ("3d-1w", 3 * DAY, 7 * DAY),
    ("1w-1mo", 7 * DAY, MONTH),
    ("1-3mo", MONTH, 3 * MONTH),
    ("3-6mo", 3 * MONTH, SIX_MONTHS),
    ("6mo", SIX_MONTHS, math.inf),
)


class TimeBucketTable:
    """Thirteen contiguous gap buckets; the last one is the repeatable 6-month token."""

    def __init__(self, buckets: Iterable[tuple[str, float, float]] = DEFAULT_BUCKETS):
        self.buckets = tuple(TimeBucket(*b) for b in buckets)
        if len(self.buckets) != 13:
            raise ValueError("time table must have exactly 13 buckets")
        for prev, nxt in zip(self.buckets, self.buckets[1:]):
            if not prev.lower < prev.upper or nxt.lower != prev.upper:
                raise ValueError("time buckets must be ascending and contiguous")
        if self.buckets[0].lower <= 0:
            raise ValueError("smallest bucket bound must be positive")
        if not self.buckets[-1].repeatable:
            raise ValueError("top bucket must be unbounded")
        self.top = self.buckets[-1]
        self._lowers = [b.lower for b in self.buckets[:-1]]
        self.by_label = {b.label: b for b in self.buckets}

    @property
    def tokens(self) -> list[str]:
        return [token(TokenKind.TIME, b.label) for b in self.buckets]

    def bucket_of(self, gap: float) -> TimeBucket | None:
        if gap < self.buckets[0].lower:
            return None
        if gap >= self.top.lower:
            return self.top
        return self.buckets[bisect_right(self._lowers, gap) - 1]

    def midpoint(self, label: str) -> float:
        b = self.by_label[label]
        if b.repeatable:
            return b.lower
        return math.sqrt(b.lower * b.upper)


def encode_gap(gap: float, table: TimeBucketTable) -> list[str]:
    """Time tokens separating two events ``gap`` seconds apart."""
    if gap < 0:
        raise ValueError("non-chronological events")
    b = table.bucket_of(gap)
    if b is None:
        return []
    if b.repeatable:
        count = int(math.floor(gap / b.lower + 0.5))
        return [token(TokenKind.TIME, b.label)] * count
    return [token(TokenKind.TIME, b.label)]


def decode_gap(tok: str, table: TimeBucketTable) -> float:
    """Seconds represented by one token: geometric bucket midpoint, 0 for non-time tokens."""
    if not tok.startswith(PREFIX[TokenKind.TIME]):
        return 0.0
    return table.midpoint(payload_of(tok))


# ---------------------------------------------------------------------------
# Lab deciles

N_BINS = 10
MIN_LAB_VALUES = 10


class QuantileBinning:
    """Nine decile cut points per (component, unit) pair."""

    def __init__(self, cuts: dict[tuple[str, str], np.ndarray] | None = None):
        self.cuts = {k: np.asarray(v, dtype=float) for k, v in (cuts or {}).items()}

    def __contains__(self, key) -> bool:
        return key in self.cuts

    def assign(self, component: str, unit: str, value: float) -> int | None:
        """Bin in 1..10, or None when the pair was never fitted.

        Bin b covers (cut[b-1], cut[b]]; values beyond the range clamp to the
        end bins.
        """
        cuts = self.cuts.get((component, unit))
        if cuts is None:
            return None
        return 1 + bisect_left(cuts.tolist(), value)

    def bin_range(self, component: str, unit: str, b: int) -> tuple[float, float]:
        cuts = self.cuts[(component, unit)]
        lo = -math.inf if b == 1 else float(cuts[b - 2])
        hi = math.inf if b == N_BINS else float(cuts[b - 1])
        return lo, hi

    def dumps(self) -> str:
        lines = []
        for (comp, unit), cuts in sorted(self.cuts.items()):
            lines.append("\t".join([comp, unit, *(repr(float(c)) for c in cuts)]))
        return "".join(line + "\n" for line in lines)

    @classmethod
    def loads(cls, text: str) -> "QuantileBinning":
        cuts = {}
        for line in text.splitlines():
            if not line:
                continue
            comp, unit, *vals = line.split("\t")
            if len(vals) != N_BINS - 1:
                raise ValueError(f"expected 9 cut points for {comp}|{unit}")
            cuts[(comp, unit)] = np.array([float(v) for v in vals])
        return cls(cuts)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "QuantileBinning":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def fit_lab_bins(values: Iterable[tuple[str, str, float]], min_count: int = MIN_LAB_VALUES) -> QuantileBinning:
    """Fit equal-frequency decile cuts from training-split lab values.

    Cut points are linear-interpolated empirical deciles. Pairs with fewer
    than ``min_count`` values are skipped with a warning.
    """
    grouped: dict[tuple[str, str], list[float]] = {}
    for comp, unit, value in values:
        grouped.setdefault((comp, unit), []).append(float(value))
    cuts = {}
    for key, vals in grouped.items():
        if len(vals) < min_count:
            logger.warning("lab %s|%s has %d values (<%d); left unbinned", key[0], key[1], len(vals), min_count)
            continue
        cuts[key] = np.percentile(np.asarray(vals), np.arange(1, N_BINS) * 100.0 / N_BINS)
    return QuantileBinning(cuts)


# ---------------------------------------------------------------------------
# Vocabulary


def age_bucket(age: float, lo: int = 18, hi: int = 120, width: int = 5) -> str:
    a = int(min(max(age, lo), hi))
    start = lo + (a - lo) // width * width
    return f"{start}-{start + width - 1}"


def year_bucket(years: float, lo: int = 0, hi: int = 60, width: int = 5) -> str:
    y = int(min(max(years, lo), hi - 1))
    start = lo + (y - lo) // width * width
    return f"{start}-{start + width - 1}"


@dataclass
class CorpusStats:
    """Event frequencies over the training split."""

    diagnoses: Counter = field(default_factory=Counter)
    medications: Counter = field(default_factory=Counter)
    labs: Counter = field(default_factory=Counter)  # keyed by (component, unit)
    procedures: Counter = field(default_factory=Counter)
    encounter_types: Counter = field(default_factory=Counter)
    departments: Counter = field(default_factory=Counter)
    complaints: Counter = field(default_factory=Counter)
    locations: Counter = field(default_factory=Counter)

    @property
    def n_events(self) -> int:
        return sum(
            sum(c.values())
            for c in (self.diagnoses, self.medications, self.labs, self.procedures, self.encounter_types)
        )


@dataclass(frozen=True)
class VocabConfig:
    max_diagnoses: int | None = None
    max_medications: int | None = None
    max_labs: int | None = 1000
    max_procedures: int | None = 1500
    age_range: tuple[int, int] = (18, 120)
    year_range: tuple[int, int] = (0, 60)
    bucket_width: int = 5


class Vocabulary:
    """Immutable bijection between token strings and dense ids.

    Also carries the admitted diagnosis and medication codes, which the
    parser uses to decide whether a generated multi-token run is a real code.
    """

    def __init__(
        self,
        entries: Sequence[tuple[TokenKind, str]],
        diagnosis_codes: Iterable[str] = (),
        medication_codes: Iterable[str] = (),
    ):
        self._strings = tuple(s for _, s in entries)
        self._kinds = tuple(k for k, _ in entries)
        self._ids = {s: i for i, s in enumerate(self._strings)}
        if len(self._ids) != len(self._strings):
            raise ValueError("duplicate token strings")
        for kind in SPECIAL:
            if self._kinds.count(kind) != 1:
                raise ValueError(f"vocabulary needs exactly one {kind.name} token")
        self.diagnosis_codes = frozenset(diagnosis_codes)
        self.medication_codes = frozenset(medication_codes)
        self.pad_id = self._ids[PAD]
        self.unk_id = self._ids[UNK]
        self.sep_id = self._ids[SEP]
        self.bos_id = self._ids[BOS]
        self.kind_codes = np.array([_KIND_ORDER.index(k) for k in self._kinds], dtype=np.int16)

    def __len__(self) -> int:
        return len(self._strings)

    def __contains__(self, s: str) -> bool:
        return s in self._ids

    def id(self, s: str) -> int:
        return self._ids[s]

    def get(self, s: str, default: int | None = None) -> int | None:
        return self._ids.get(s, default)

    def string(self, i: int) -> str:
        return self._strings[i]

    def kind(self, i: int) -> TokenKind:
        return self._kinds[i]

    @property
    def strings(self) -> tuple[str, ...]:
        return self._strings

    @property
    def kinds(self) -> tuple[TokenKind, ...]:
        return self._kinds

    def ids_of_kind(self, kind: TokenKind) -> list[int]:
        return [i for i, k in enumerate(self._kinds) if k is kind]

    def time_deltas(self, table: TimeBucketTable) -> np.ndarray:
        """Seconds advanced by each token id (0 for non-time tokens)."""
        return np.array([decode_gap(s, table) for s in self._strings], dtype=np.float64)

    def dumps(self) -> str:
        return "".join(f"{i}\t{k.value}\t{s}\n" for i, (k, s) in enumerate(zip(self._kinds, self._strings)))

    def hash(self) -> bytes:
        return hashlib.sha256(self.dumps().encode("utf-8")).digest()

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "vocab.tsv").write_text(self.dumps(), encoding="utf-8")
        codes = [f"dx\t{c}\n" for c in sorted(self.diagnosis_codes)]
        codes += [f"med\t{c}\n" for c in sorted(self.medication_codes)]
        (d / "codes.tsv").write_text("".join(codes), encoding="utf-8")

    @classmethod
    def loads(cls, text: str, codes_text: str = "") -> "Vocabulary":
        entries = []
        for n, line in enumerate(text.splitlines()):
            i, kind, s = line.split("\t", 2)
            if int(i) != n:
                raise ValueError("vocabulary ids must be dense from 0")
            entries.append((TokenKind(kind), s))
        dx, med = [], []
        for line in codes_text.splitlines():
            fam, code = line.split("\t")
            (dx if fam == "dx" else med).append(code)
        return cls(entries, dx, med)

    @classmethod
    def load(cls, directory) -> "Vocabulary":
        d = Path(directory)
        codes = d / "codes.tsv"
        return cls.loads(
            (d / "vocab.tsv").read_text(encoding="utf-8"),
            codes.read_text(encoding="utf-8") if codes.exists() else "",
        )


def _top_k(counter: Counter, k: int | None, key=str) -> list:
    ranked = sorted(counter.items(), key=lambda kv: (-kv[1], key(kv[0])))
    if k is not None:
        ranked = ranked[:k]
    return [item for item, _ in ranked]


def build_vocabulary(
    stats: CorpusStats,
    config: VocabConfig = VocabConfig(),
    table: TimeBucketTable | None = None,
) -> Vocabulary:
    """Assemble the vocabulary from training-split frequencies.

    Special, demographic, encounter and time tokens are always present;
    diagnoses, medications, labs and procedures are admitted by top-K code
    frequency (ties broken lexicographically). All parts of an admitted
    code enter the vocabulary.
    """
    if stats.n_events == 0:
        raise ValueError("no events observed")
    table = table or TimeBucketTable()
    by_kind: dict[TokenKind, set[str]] = {k: set() for k in TokenKind}

    by_kind[TokenKind.SEX] = {token(TokenKind.SEX, s) for s in SEX_CATEGORIES}
    by_kind[TokenKind.RACE] = {token(TokenKind.RACE, r) for r in RACE_CATEGORIES}
    lo, hi = config.age_range
    by_kind[TokenKind.AGE] = {
        token(TokenKind.AGE, age_bucket(a, lo, hi, config.bucket_width)) for a in range(lo, hi + 1)
    }
    ylo, yhi = config.year_range
    by_kind[TokenKind.YEAR] = {
        token(TokenKind.YEAR, year_bucket(y, ylo, yhi, config.bucket_width)) for y in range(ylo, yhi)
    }
    for t in stats.encounter_types:
        by_kind[TokenKind.ENC_START].add(token(TokenKind.ENC_START, t))
        by_kind[TokenKind.ENC_END].add(token(TokenKind.ENC_END, t))
    by_kind[TokenKind.DEPT] = {token(TokenKind.DEPT, d) for d in stats.departments}
    by_kind[TokenKind.DEPT].add(token(TokenKind.DEPT, UNSPECIFIED_DEPARTMENT))
    by_kind[TokenKind.CC_NAME] = {token(TokenKind.CC_NAME, c) for c in stats.complaints}
    by_kind[TokenKind.CC_LOC] = {token(TokenKind.CC_LOC, c) for c in stats.locations}

    dx_codes = [canonical_icd(c) for c in _top_k(stats.diagnoses, config.max_diagnoses)]
    for code in dx_codes:
        for part in encode_diagnosis(code):
            if part != UNK:
                by_kind[TokenKind(part.split(":")[0].lower())].add(part)
    med_codes = [c for c in _top_k(stats.medications, config.max_medications) if len(c) == 7]
    for code in med_codes:
        for kind, part in zip((TokenKind.MED1, TokenKind.MED2, TokenKind.MED3), encode_medication(code)):
            by_kind[kind].add(part)
    for comp, unit in _top_k(stats.labs, config.max_labs, key=lambda k: lab_key(*k)):
        by_kind[TokenKind.LAB].add(token(TokenKind.LAB, lab_key(comp, unit)))
    by_kind[TokenKind.PROC] = {token(TokenKind.PROC, p) for p in _top_k(stats.procedures, config.max_procedures)}

    entries: list[tuple[TokenKind, str]] = [(k, SPECIAL[k]) for k in (TokenKind.PAD, TokenKind.UNK, TokenKind.SEP, TokenKind.BOS)]
    ordered = {
        TokenKind.LAB_Q: [token(TokenKind.LAB_Q, str(b)) for b in range(1, N_BINS + 1)],
        TokenKind.TIME: table.tokens,
        TokenKind.AGE: sorted(by_kind[TokenKind.AGE], key=lambda s: int(payload_of(s).split("-")[0])),
        TokenKind.YEAR: sorted(by_kind[TokenKind.YEAR], key=lambda s: int(payload_of(s).split("-")[0])),
    }
    for kind in TokenKind:
        if kind in SPECIAL:
            continue
        strings = ordered.get(kind) or sorted(by_kind[kind])
        entries.extend((kind, s) for s in strings)
    return Vocabulary(entries, dx_codes, med_codes)
