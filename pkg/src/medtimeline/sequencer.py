"""Record -> token stream conversion, parsing, packing, splitting and token files."""

from __future__ import annotations

import datetime as dt
import logging
import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .synthgen import PatientRecord, SchemaError
from .vocab import (
    BOS,
    UNK,
    CorpusStats,
    QuantileBinning,
    TimeBucketTable,
    TokenKind,
    UNSPECIFIED_DEPARTMENT,
    VocabConfig,
    Vocabulary,
    age_bucket,
    canonical_icd,
    decode_diagnosis,
    decode_medication,
    encode_diagnosis,
    encode_gap,
    encode_medication,
    lab_key,
    payload_of,
    token,
    year_bucket,
)

logger = logging.getLogger(__name__)

DEFAULT_TABLE = TimeBucketTable()
EPOCH_1970 = 1970

# event kinds reported by the parser
DIAGNOSIS = "diagnosis"
LAB = "lab"
MEDICATION = "medication"
PROCEDURE = "procedure"
ENCOUNTER_START = "encounter_start"
ENCOUNTER_END = "encounter_end"
TIME = "time"
DEMOGRAPHIC = "demographic"
SPECIAL = "special"


@dataclass
class TokenSequence:
    patient_id: str
    tokens: np.ndarray  # int32 ids
    times: np.ndarray  # int64 epoch seconds, one per token

    def __len__(self) -> int:
        return len(self.tokens)

    def until(self, instant: int) -> "TokenSequence":
        """Prefix of tokens whose instant is <= ``instant``."""
        k = int(np.searchsorted(self.times, instant, side="right"))
        return TokenSequence(self.patient_id, self.tokens[:k], self.times[:k])


# ---------------------------------------------------------------------------
# Corpus statistics (training split only)


def corpus_stats(records: Iterable[PatientRecord]) -> CorpusStats:
    stats = CorpusStats()
    for r in records:
        for e in r.encounters:
            stats.encounter_types[e.type] += 1
            stats.departments[e.department or UNSPECIFIED_DEPARTMENT] += 1
            for name, loc in e.complaints:
                stats.complaints[name] += 1
                if loc:
                    stats.locations[loc] += 1
            for code, _ in e.diagnoses:
                stats.diagnoses[canonical_icd(code)] += 1
            for comp, unit, _, _ in e.labs:
                stats.labs[(comp, unit)] += 1
            for code, _ in e.medications:
                stats.medications[code] += 1
            for code, _ in e.procedures:
                stats.procedures[code] += 1
    return stats


def lab_values(records: Iterable[PatientRecord]) -> Iterator[tuple[str, str, float]]:
    for r in records:
        for e in r.encounters:
            for comp, unit, value, _ in e.labs:
                yield comp, unit, value


# ---------------------------------------------------------------------------
# Tokenization


def _midnight(date: str) -> int:
    d = dt.date.fromisoformat(date)
    return int(dt.datetime(d.year, d.month, d.day, tzinfo=dt.timezone.utc).timestamp())


def _year(instant: int) -> int:
    return dt.datetime.fromtimestamp(instant, dt.timezone.utc).year


class _Encoder:
    """Token-string -> event-token mapping for one vocabulary (cached lookups)."""

    def __init__(self, vocab: Vocabulary, bins: QuantileBinning, table: TimeBucketTable,
                 config: VocabConfig = VocabConfig()):
        self.vocab = vocab
        self.bins = bins
        self.table = table
        self.config = config
        self._gap_cache: dict[float, list[int]] = {}

    def ids(self, strings: Sequence[str]) -> list[int]:
        return [self.vocab.get(s, self.vocab.unk_id) for s in strings]

    def header(self, enc) -> list[int]:
        v = self.vocab
        out = [v.get(token(TokenKind.ENC_START, enc.type), v.unk_id)]
        dept = token(TokenKind.DEPT, enc.department or UNSPECIFIED_DEPARTMENT)
        out.append(v.get(dept, v.id(token(TokenKind.DEPT, UNSPECIFIED_DEPARTMENT))))
        for name, loc in enc.complaints:
            cc = v.get(token(TokenKind.CC_NAME, name))
            if cc is None:
                continue
            out.append(cc)
            if loc:
                ccl = v.get(token(TokenKind.CC_LOC, loc))
                if ccl is not None:
                    out.append(ccl)
        return out

    def diagnosis(self, code: str) -> list[int] | None:
        parts = encode_diagnosis(code)
        if parts == [UNK]:
            return [self.vocab.unk_id]
        if canonical_icd(code) not in self.vocab.diagnosis_codes:
            return None
        return self.ids(parts)

    def medication(self, code: str) -> list[int] | None:
        parts = encode_medication(code)
        if parts == [UNK]:
            return [self.vocab.unk_id]
        if code not in self.vocab.medication_codes:
            return None
        return self.ids(parts)

    def lab(self, comp: str, unit: str, value: float) -> list[int] | None:
        lab_id = self.vocab.get(token(TokenKind.LAB, lab_key(comp, unit)))
        if lab_id is None:
            return None
        b = self.bins.assign(comp, unit, value)
        q = self.vocab.unk_id if b is None else self.vocab.id(token(TokenKind.LAB_Q, str(b)))
        return [lab_id, q]

    def procedure(self, code: str) -> list[int] | None:
        pid = self.vocab.get(token(TokenKind.PROC, code))
        return None if pid is None else [pid]

    def gap(self, seconds: float) -> list[int]:
        hit = self._gap_cache.get(seconds)
        if hit is None:
            hit = self.ids(encode_gap(seconds, self.table))
            if len(self._gap_cache) < 100_000:
                self._gap_cache[seconds] = hit
        return hit


_encoders: dict[int, _Encoder] = {}


def _encoder(vocab, bins, table) -> _Encoder:
    key = (id(vocab), id(bins), id(table))
    enc = _encoders.get(key)
    if enc is None or enc.vocab is not vocab or enc.bins is not bins or enc.table is not table:
        enc = _Encoder(vocab, bins, table)
        _encoders.clear()
        _encoders[key] = enc
    return enc


def _placed_events(record: PatientRecord, enc: _Encoder, rng: np.random.Generator):
    """(instant, encounter, rank, tiebreak, ids) tuples ready to sort."""
    events = []
    for ei, e in enumerate(record.encounters):
        if e.end < e.start:
            raise ValueError("non-chronological record")
        events.append((e.start, ei, 0, 0, enc.header(e)))
        by_instant: dict[int, list[list[int]]] = {}
        for code, date in e.diagnoses:
            ids = enc.diagnosis(code)
            if ids is None:
                continue
            by_instant.setdefault(max(e.start, _midnight(date)), []).append(ids)
        for instant, group in by_instant.items():
            for k, j in enumerate(rng.permutation(len(group))):
                events.append((instant, ei, 1, k, group[j]))
        for k, (comp, unit, value, instant) in enumerate(e.labs):
            if instant < e.start:
                raise ValueError("non-chronological record")
            ids = enc.lab(comp, unit, value)
            if ids is not None:
                events.append((instant, ei, 2, k, ids))
        for k, (code, instant) in enumerate(e.medications):
            if instant < e.start:
                raise ValueError("non-chronological record")
            ids = enc.medication(code)
            if ids is not None:
                events.append((instant, ei, 3, k, ids))
        for k, (code, instant) in enumerate(e.procedures):
            if instant < e.start:
                raise ValueError("non-chronological record")
            ids = enc.procedure(code)
            if ids is not None:
                events.append((instant, ei, 4, k, ids))
        end_id = enc.vocab.get(token(TokenKind.ENC_END, e.type), enc.vocab.unk_id)
        events.append((e.end, ei, 5, 0, [end_id]))
    events.sort(key=lambda ev: ev[:4])
    return events


def tokenize_record(
    record: PatientRecord,
    vocab: Vocabulary,
    bins: QuantileBinning,
    rng: np.random.Generator,
    table: TimeBucketTable = DEFAULT_TABLE,
    config: VocabConfig = VocabConfig(),
) -> TokenSequence:
    """Demographics, [BOS], then every event at its rule-defined instant.

    Diagnoses sit at max(encounter start, midnight of their date) and
    same-instant diagnoses are shuffled with ``rng``. Time tokens between two
    events carry the later event's instant, so a prefix cut at instant T
    never reveals the gap to the next event.
    """
    enc = _encoder(vocab, bins, table)
    events = _placed_events(record, enc, rng)
    first = events[0][0] if events else record.record_start
    age = record.age_at(first)
    demo = [
        token(TokenKind.SEX, record.sex),
        token(TokenKind.RACE, record.race),
        token(TokenKind.AGE, age_bucket(age, *config.age_range, config.bucket_width)),
        token(TokenKind.YEAR, year_bucket(_year(first) - EPOCH_1970, *config.year_range, config.bucket_width)),
        BOS,
    ]
    ids = enc.ids(demo)
    times = [first] * len(ids)
    prev = first
    for instant, _, _, _, ev_ids in events:
        gap = enc.gap(float(instant - prev))
        if gap:
            ids.extend(gap)
            times.extend([instant] * len(gap))
        ids.extend(ev_ids)
        times.extend([instant] * len(ev_ids))
        prev = instant
    return TokenSequence(record.patient_id, np.asarray(ids, dtype=np.int32), np.asarray(times, dtype=np.int64))


def record_events(record: PatientRecord, vocab: Vocabulary, bins: QuantileBinning) -> Counter:
    """Multiset of tokenizable events in ``record``, keyed like :meth:`ParsedEvent.key`."""
    enc = _encoder(vocab, bins, DEFAULT_TABLE)
    out: Counter = Counter()
    for e in record.encounters:
        header = enc.header(e)
        out[_header_key(header, vocab)] += 1
        out[(ENCOUNTER_END, e.type)] += 1
        for code, _ in e.diagnoses:
            if enc.diagnosis(code) is not None:
                out[(DIAGNOSIS, canonical_icd(code))] += 1
        for comp, unit, value, _ in e.labs:
            if enc.lab(comp, unit, value) is not None:
                out[(LAB, comp, unit, bins.assign(comp, unit, value))] += 1
        for code, _ in e.medications:
            if enc.medication(code) is not None:
                out[(MEDICATION, code)] += 1
        for code, _ in e.procedures:
            if enc.procedure(code) is not None:
                out[(PROCEDURE, code)] += 1
    return out


def _header_key(ids: Sequence[int], vocab: Vocabulary) -> tuple:
    strings = [vocab.string(i) for i in ids]
    enc_type = payload_of(strings[0])
    dept = payload_of(strings[1])
    complaints = []
    for s, i in zip(strings[2:], ids[2:]):
        if vocab.kind(i) is TokenKind.CC_NAME:
            complaints.append([payload_of(s), None])
        else:
            complaints[-1][1] = payload_of(s)
    return (ENCOUNTER_START, enc_type, dept, tuple(tuple(c) for c in complaints))


# ---------------------------------------------------------------------------
# Parsing


@dataclass
class ParsedEvent:
    kind: str
    value: object
    valid: bool
    start: int  # index of the first token
    end: int  # one past the last token
    encounter: str | None = None  # innermost open encounter type at this event

    def key(self) -> tuple:
        if self.kind == LAB:
            return (LAB, *self.value)
        if self.kind == ENCOUNTER_START:
            return (ENCOUNTER_START, *self.value)
        return (self.kind, self.value)


_DX_NEXT = {TokenKind.DX1: TokenKind.DX2, TokenKind.DX2: TokenKind.DX3}


def parse_tokens(
    tokens: Sequence[int],
    vocab: Vocabulary,
    open_encounters: Sequence[str] = (),
) -> list[ParsedEvent]:
    """Greedy, total left-to-right parse of a token stream into events.

    Grammar violations (unknown ICD/ATC combination, lab without quantile,
    encounter start without specialty, orphan continuation tokens, a run cut
    off by the end of the stream) produce ``valid=False`` events and parsing
    resumes at the next token.
    """
    kinds = vocab.kinds
    strings = vocab.strings
    toks = [int(t) for t in tokens]
    n = len(toks)
    stack = list(open_encounters)
    events: list[ParsedEvent] = []
    i = 0
    K = TokenKind
    while i < n:
        k = kinds[toks[i]]
        ctx = stack[-1] if stack else None
        if k is K.DX1:
            j = i + 1
            expect = K.DX2
            while j < n and j - i < 3 and kinds[toks[j]] is expect:
                expect = _DX_NEXT.get(expect)
                j += 1
            code = decode_diagnosis([strings[t] for t in toks[i:j]])
            events.append(ParsedEvent(DIAGNOSIS, code, code in vocab.diagnosis_codes, i, j, ctx))
            i = j
        elif k in (K.DX2, K.DX3):
            events.append(ParsedEvent(DIAGNOSIS, payload_of(strings[toks[i]]), False, i, i + 1, ctx))
            i += 1
        elif k is K.MED1:
            j = i + 1
            for expect in (K.MED2, K.MED3):
                if j < n and kinds[toks[j]] is expect:
                    j += 1
                else:
                    break
            code = decode_medication([strings[t] for t in toks[i:j]])
            valid = j - i == 3 and code in vocab.medication_codes
            events.append(ParsedEvent(MEDICATION, code, valid, i, j, ctx))
            i = j
        elif k in (K.MED2, K.MED3):
            events.append(ParsedEvent(MEDICATION, payload_of(strings[toks[i]]), False, i, i + 1, ctx))
            i += 1
        elif k is K.LAB:
            comp, unit = payload_of(strings[toks[i]]).split("|", 1)
            nxt = kinds[toks[i + 1]] if i + 1 < n else None
            if nxt is K.LAB_Q:
                b = int(payload_of(strings[toks[i + 1]]))
                events.append(ParsedEvent(LAB, (comp, unit, b), True, i, i + 2, ctx))
                i += 2
            elif nxt is K.UNK:
                # pair with too few training values to bin
                events.append(ParsedEvent(LAB, (comp, unit, None), True, i, i + 2, ctx))
                i += 2
            else:
                events.append(ParsedEvent(LAB, (comp, unit, None), False, i, i + 1, ctx))
                i += 1
        elif k is K.LAB_Q:
            events.append(ParsedEvent(LAB, (None, None, int(payload_of(strings[toks[i]]))), False, i, i + 1, ctx))
            i += 1
        elif k is K.ENC_START:
            etype = payload_of(strings[toks[i]])
            if i + 1 < n and kinds[toks[i + 1]] is K.DEPT:
                dept = payload_of(strings[toks[i + 1]])
                j = i + 2
                complaints = []
                while j < n and kinds[toks[j]] is K.CC_NAME:
                    name, loc = payload_of(strings[toks[j]]), None
                    j += 1
                    if j < n and kinds[toks[j]] is K.CC_LOC:
                        loc = payload_of(strings[toks[j]])
                        j += 1
                    complaints.append((name, loc))
                events.append(ParsedEvent(ENCOUNTER_START, (etype, dept, tuple(complaints)), True, i, j, etype))
                i = j
            else:
                events.append(ParsedEvent(ENCOUNTER_START, (etype, None, ()), False, i, i + 1, etype))
                i += 1
            stack.append(etype)
        elif k in (K.DEPT, K.CC_NAME, K.CC_LOC):
            events.append(ParsedEvent(ENCOUNTER_START, (None, payload_of(strings[toks[i]]), ()), False, i, i + 1, ctx))
            i += 1
        elif k is K.ENC_END:
            etype = payload_of(strings[toks[i]])
            events.append(ParsedEvent(ENCOUNTER_END, etype, True, i, i + 1, ctx))
            for pos in range(len(stack) - 1, -1, -1):
                if stack[pos] == etype:
                    del stack[pos]
                    break
            i += 1
        elif k is K.PROC:
            events.append(ParsedEvent(PROCEDURE, payload_of(strings[toks[i]]), True, i, i + 1, ctx))
            i += 1
        elif k is K.TIME:
            events.append(ParsedEvent(TIME, payload_of(strings[toks[i]]), True, i, i + 1, ctx))
            i += 1
        elif k in (K.SEX, K.RACE, K.AGE, K.YEAR, K.BOS):
            events.append(ParsedEvent(DEMOGRAPHIC, strings[toks[i]], True, i, i + 1, ctx))
            i += 1
        else:
            events.append(ParsedEvent(SPECIAL, strings[toks[i]], k is not K.UNK, i, i + 1, ctx))
            i += 1
    return events


def open_encounters_after(tokens: Sequence[int], vocab: Vocabulary) -> list[str]:
    """Encounter types still open at the end of ``tokens`` (innermost last)."""
    stack: list[str] = []
    for t in tokens:
        k = vocab.kind(int(t))
        if k is TokenKind.ENC_START:
            stack.append(payload_of(vocab.string(int(t))))
        elif k is TokenKind.ENC_END:
            etype = payload_of(vocab.string(int(t)))
            if etype in stack:
                del stack[len(stack) - 1 - stack[::-1].index(etype)]
    return stack


# ---------------------------------------------------------------------------
# Packing, splitting, truncation


@dataclass
class PackedBatch:
    rows: np.ndarray  # (k, context_len) int32
    provenance: np.ndarray  # (k, context_len) patient index in input order, -1 for separators/padding
    loss_mask: np.ndarray  # (k, context_len) bool, False on padding


def pack_sequences(
    sequences: Iterable[Sequence[int] | TokenSequence],
    context_len: int,
    vocab: Vocabulary,
    rows_per_batch: int = 1,
) -> Iterator[PackedBatch]:
    """Concatenate patients with one [SEP] between neighbours into dense rows.

    The final partial row is padded with [PAD] and masked out.
    """
    if context_len < 2:
        raise ValueError("context_len must be >= 2")
    block = context_len * rows_per_batch
    tok_buf: list[np.ndarray] = []
    prov_buf: list[np.ndarray] = []
    size = 0

    def emit(toks, prov):
        k = len(toks) // context_len
        rows = toks.reshape(k, context_len)
        return PackedBatch(rows, prov.reshape(k, context_len), rows != vocab.pad_id)

    first = True
    for idx, seq in enumerate(sequences):
        toks = np.asarray(seq.tokens if isinstance(seq, TokenSequence) else seq, dtype=np.int32)
        if not first:
            tok_buf.append(np.array([vocab.sep_id], dtype=np.int32))
            prov_buf.append(np.array([-1]))
            size += 1
        first = False
        tok_buf.append(toks)
        prov_buf.append(np.full(len(toks), idx))
        size += len(toks)
        if size >= block:
            toks_all = np.concatenate(tok_buf)
            prov_all = np.concatenate(prov_buf)
            n_full = size // block * block
            for s in range(0, n_full, block):
                yield emit(toks_all[s:s + block], prov_all[s:s + block])
            tok_buf, prov_buf = [toks_all[n_full:]], [prov_all[n_full:]]
            size -= n_full
    if size:
        toks_all = np.concatenate(tok_buf)
        prov_all = np.concatenate(prov_buf)
        if size % context_len:
            pad = context_len - size % context_len
            toks_all = np.concatenate([toks_all, np.full(pad, vocab.pad_id, dtype=np.int32)])
            prov_all = np.concatenate([prov_all, np.full(pad, -1)])
        yield emit(toks_all, prov_all)


def split_patients(patient_ids: Sequence[str], fraction: float = 0.9, seed: int = 0) -> tuple[list[str], list[str]]:
    """Random patient-level split; |train| = round(fraction * n)."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must be in (0, 1)")
    ids = list(patient_ids)
    n_train = int(round(fraction * len(ids)))
    order = np.random.default_rng(seed).permutation(len(ids))
    chosen = set(order[:n_train].tolist())
    train = [p for i, p in enumerate(ids) if i in chosen]
    test = [p for i, p in enumerate(ids) if i not in chosen]
    return train, test


def left_truncate(tokens, budget: int):
    if budget < 1:
        raise ValueError("budget must be >= 1")
    return tokens[-budget:] if len(tokens) > budget else tokens


# ---------------------------------------------------------------------------
# Token files

TOKEN_MAGIC = b"MTLTOKv\x00"
TOKEN_VERSION = 1
_HEADER = struct.Struct("<8sII32sQ")


def write_token_file(path, sequences: Sequence[TokenSequence], vocab_hash: bytes, context_len: int) -> None:
    """Binary ids (little-endian uint32) plus ``.idx`` boundaries and ``.times.npy`` sidecars."""
    path = Path(path)
    tokens = np.concatenate([s.tokens for s in sequences]).astype("<u4") if sequences else np.zeros(0, "<u4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(TOKEN_MAGIC, TOKEN_VERSION, context_len, vocab_hash, len(tokens)))
        fh.write(tokens.tobytes())
    lines, pos = [], 0
    for s in sequences:
        lines.append(f"{s.patient_id}\t{pos}\t{pos + len(s)}\n")
        pos += len(s)
    Path(str(path) + ".idx").write_text("".join(lines), encoding="utf-8")
    times = np.concatenate([s.times for s in sequences]) if sequences else np.zeros(0)
    np.save(str(path) + ".times.npy", np.asarray(times))


def read_token_file(path, vocab_hash: bytes | None = None) -> tuple[dict, list[TokenSequence]]:
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, context_len, vhash, n = _HEADER.unpack_from(raw)
    if magic != TOKEN_MAGIC or version != TOKEN_VERSION:
        raise SchemaError(f"{path}: not a version-{TOKEN_VERSION} token file")
    if vocab_hash is not None and vhash != vocab_hash:
        raise SchemaError(f"{path}: token file was written with a different vocabulary")
    tokens = np.frombuffer(raw, dtype="<u4", offset=_HEADER.size, count=n).astype(np.int32)
    times = np.load(str(path) + ".times.npy")
    sequences = []
    for line in Path(str(path) + ".idx").read_text(encoding="utf-8").splitlines():
        pid, a, b = line.split("\t")
        a, b = int(a), int(b)
        sequences.append(TokenSequence(pid, tokens[a:b], times[a:b]))
    header = {"version": version, "context_len": context_len, "vocab_hash": vhash.hex(), "n_tokens": n}
    return header, sequences
