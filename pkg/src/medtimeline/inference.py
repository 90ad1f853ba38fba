"""Monte Carlo trajectory generation and right-censored estimators over trajectories."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import model as M
from .sequencer import DIAGNOSIS, TokenSequence, open_encounters_after, parse_tokens, write_token_file
from .vocab import TimeBucketTable, TokenKind, Vocabulary, payload_of

# ---------------------------------------------------------------------------
# token models: objects with .decoder() returning prefill/step/select


class TransformerTokenModel:
    """``sliding=True`` decodes with a ring-buffer cache; the default re-encodes when the window fills."""

    def __init__(self, params, config: M.ModelConfig, window: int | None = None, keep: int | None = None,
                 sliding: bool = False):
        self.params = params
        self.config = config
        self.window = window or config.context_len
        self.keep = keep or self.window // 2
        self.sliding = sliding

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    def decoder(self):
        return M.KVDecoder(self.params, self.config, self.window, self.keep, self.sliding)


class MarkovTokenModel:
    """First-order Markov chain over a few token ids; next-token law depends on the last token only.

    ``transition[a, b]`` is P(next = states[b] | last = states[a]). A prompt
    whose last token is not a state starts from ``initial``.
    """

    def __init__(self, states: Sequence[int], transition, vocab_size: int, initial=None):
        self.states = np.asarray(states, dtype=np.int64)
        self.P = np.asarray(transition, dtype=np.float64)
        k = len(self.states)
        if self.P.shape != (k, k) or np.any(self.P < 0) or not np.allclose(self.P.sum(1), 1.0):
            raise ValueError("transition must be a row-stochastic k x k matrix")
        self.initial = np.full(k, 1.0 / k) if initial is None else np.asarray(initial, dtype=np.float64)
        self.vocab_size = vocab_size
        self.window = 1 << 30
        self._index = {int(s): i for i, s in enumerate(self.states)}
        with np.errstate(divide="ignore"):
            self._logP = np.log(self.P)
            self._log_init = np.log(self.initial)

    def _logits(self, last_tokens) -> np.ndarray:
        out = np.full((len(last_tokens), self.vocab_size), -np.inf)
        for r, t in enumerate(last_tokens):
            i = self._index.get(int(t))
            out[r, self.states] = self._log_init if i is None else self._logP[i]
        return out

    def decoder(self):
        return _MarkovDecoder(self)


class _MarkovDecoder:
    def __init__(self, m: MarkovTokenModel):
        self.m = m
        self.last = np.zeros(0, dtype=np.int64)

    def prefill(self, prompts):
        self.last = np.array([int(p[-1]) for p in prompts], dtype=np.int64)
        return self.m._logits(self.last)

    def step(self, tokens):
        self.last = np.asarray(tokens, dtype=np.int64).copy()
        return self.m._logits(self.last)

    def select(self, rows):
        self.last = self.last[np.asarray(rows, dtype=np.int64)]


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    tokens: np.ndarray  # generated ids
    times: np.ndarray  # seconds after the prompt's last event, per token
    open_encounters: tuple = ()  # encounter types open at the end of the prompt

    @property
    def reached_time(self) -> float:
        return float(self.times[-1]) if len(self.times) else 0.0

    def events(self, vocab: Vocabulary):
        return parse_tokens(self.tokens, vocab, self.open_encounters)


def trajectory_uniforms(seed_key: Sequence[int], count: int) -> np.ndarray:
    return np.random.default_rng(list(seed_key)).random(count)


def simulate_batch(
    model,
    prompts: Sequence[Sequence[int]],
    n: int,
    d: int,
    time_deltas: np.ndarray,
    temperature: float = 1.0,
    seed: int = 0,
    tau: float | None = None,
    retries: int = 0,
    batch_size: int = 1024,
    prompt_keys: Sequence[int] | None = None,
    reserve: int | None = None,
    vocab: Vocabulary | None = None,
) -> list[list[Trajectory]]:
    """``n`` trajectories of up to ``d`` tokens for every prompt.

    Trajectory i of prompt p draws from its own uniform stream seeded by
    (seed, key_p, i), so results do not depend on batching. A row stops once
    its clock passes ``tau``. A row that used its ``d`` tokens without
    reaching ``tau`` continues for another ``d`` tokens, at most ``retries``
    times. Prompts are left-truncated so that ``reserve`` slots of the
    context stay free for generated tokens.
    """
    if n < 1 or d < 1:
        raise ValueError("n and d must be >= 1")
    if any(len(p) == 0 for p in prompts):
        raise ValueError("prompt must be nonempty")
    keys = list(range(len(prompts))) if prompt_keys is None else list(prompt_keys)
    window = getattr(model, "window", None)
    if reserve is None:
        reserve = max(1, window // 4) if window and window < (1 << 30) else 0
    cut = [list(p)[-(window - reserve):] if window and window < (1 << 30) else list(p) for p in prompts]
    opened = [tuple(open_encounters_after(p, vocab)) if vocab is not None else () for p in prompts]
    max_tokens = d * (1 + retries)
    jobs = [(p, i) for p in range(len(prompts)) for i in range(n)]
    out: list[list[Trajectory | None]] = [[None] * n for _ in prompts]
    for start in range(0, len(jobs), batch_size):
        chunk = jobs[start:start + batch_size]
        results = _run_chunk(model, [cut[p] for p, _ in chunk],
                             [trajectory_uniforms((seed, keys[p], i), max_tokens) for p, i in chunk],
                             d, retries, time_deltas, temperature, tau)
        for (p, i), (toks, times) in zip(chunk, results):
            out[p][i] = Trajectory(toks, times, opened[p])
    return out  # type: ignore[return-value]


def simulate(model, prompt, n, d, time_deltas, temperature=1.0, seed=0, **kw) -> list[Trajectory]:
    return simulate_batch(model, [prompt], n, d, time_deltas, temperature, seed, **kw)[0]


def _run_chunk(model, prompts, uniforms, d, retries, deltas, temperature, tau, compact_at=0.25):
    B = len(prompts)
    U = np.stack(uniforms)
    dec = model.decoder()
    logits = dec.prefill(prompts)
    live = np.arange(B)  # original row of each decoder row
    alive = np.ones(B, dtype=bool)  # finished rows keep decoding until the cache is compacted
    clock = np.zeros(B)
    budget = np.full(B, d)
    used_retries = np.zeros(B, dtype=np.int64)
    gen = np.zeros((B, U.shape[1]), dtype=np.int64)
    times = np.zeros((B, U.shape[1]))
    length = np.zeros(B, dtype=np.int64)
    j = 0
    while True:
        tok = M.sample_from_uniform(logits, temperature, U[live, j])
        rows = live[alive]
        gen[rows, j] = tok[alive]
        clock[rows] += deltas[tok[alive]]
        times[rows, j] = clock[rows]
        j += 1
        length[rows] = j
        done = np.zeros(len(rows), dtype=bool)
        if tau is not None:
            done |= clock[rows] > tau
        at_budget = ~done & (budget[rows] == j)
        if at_budget.any():
            short = at_budget & (used_retries[rows] < retries)
            if tau is not None:
                short &= clock[rows] < tau
            budget[rows[short]] += d
            used_retries[rows[short]] += 1
            done |= at_budget & ~short
        alive[np.flatnonzero(alive)[done]] = False
        if not alive.any():
            break
        if (~alive).mean() >= compact_at:
            keep = np.flatnonzero(alive)
            live, alive = live[keep], alive[keep]
            dec.select(keep)
            tok = tok[keep]
        logits = dec.step(tok)
    return [(gen[b, :length[b]].copy(), times[b, :length[b]].copy()) for b in range(B)]


# ---------------------------------------------------------------------------
# target sets


@dataclass(frozen=True)
class TargetSet:
    """Either explicit token ids, or diagnosis events matched by ICD prefix.

    For prefix targets the optional ``encounter_types`` restricts matches to
    diagnoses recorded inside those encounter types.
    """

    token_ids: frozenset | None = None
    icd_prefixes: tuple = ()
    encounter_types: tuple | None = None
    name: str = "target"

    @classmethod
    def tokens(cls, ids: Iterable[int], name: str = "target") -> "TargetSet":
        return cls(token_ids=frozenset(int(i) for i in ids), name=name)

    @classmethod
    def icd(cls, *prefixes: str, encounter_types=None, name: str | None = None) -> "TargetSet":
        norm = tuple(p.replace(".", "").upper() for p in prefixes)
        return cls(icd_prefixes=norm, encounter_types=tuple(encounter_types) if encounter_types else None,
                   name=name or "|".join(prefixes))

    def _candidates(self, vocab: Vocabulary) -> np.ndarray:
        mask = np.zeros(len(vocab), dtype=bool)
        for i in vocab.ids_of_kind(TokenKind.DX1):
            head = payload_of(vocab.string(i))
            if any(p[:3].startswith(head) or head.startswith(p) for p in self.icd_prefixes):
                mask[i] = True
        return mask

    def hit_times(self, traj: Trajectory, vocab: Vocabulary, _cand=None) -> list[float]:
        """Times of every matching event, in generation order."""
        if self.token_ids is not None:
            return [float(t) for tok, t in zip(traj.tokens.tolist(), traj.times) if tok in self.token_ids]
        cand = self._candidates(vocab) if _cand is None else _cand
        if not cand[traj.tokens].any():
            return []
        out = []
        for ev in traj.events(vocab):
            if ev.kind != DIAGNOSIS or not ev.valid:
                continue
            code = ev.value.replace(".", "")
            if not any(code.startswith(p) for p in self.icd_prefixes):
                continue
            if self.encounter_types is not None and ev.encounter not in self.encounter_types:
                continue
            out.append(float(traj.times[ev.start]))
        return out

    def all_hit_times(self, trajs: Sequence[Trajectory], vocab: Vocabulary) -> list[list[float]]:
        cand = None if self.token_ids is not None else self._candidates(vocab)
        return [self.hit_times(t, vocab, cand) for t in trajs]


# ---------------------------------------------------------------------------
# estimators


@dataclass(frozen=True)
class ProbabilityEstimate:
    value: float | None  # None marks an excluded patient (empty denominator)
    numerator: int
    denominator: int
    n: int

    @property
    def excluded(self) -> bool:
        return self.value is None


def estimate_probability(trajs: Sequence[Trajectory], target: TargetSet, tau: float, vocab: Vocabulary,
                         hits: Sequence[Sequence[float]] | None = None) -> ProbabilityEstimate:
    """Fraction of uncensored trajectories with a target event by ``tau``.

    A trajectory is uncensored when it hit the target by ``tau`` or its
    clock reached ``tau``.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    hits = target.all_hit_times(trajs, vocab) if hits is None else hits
    num = den = 0
    for t, h in zip(trajs, hits):
        hit = bool(h) and h[0] <= tau
        num += hit
        den += hit or t.reached_time >= tau
    return ProbabilityEstimate(num / den if den else None, num, den, len(trajs))


@dataclass(frozen=True)
class CountDistribution:
    at_least: dict  # k -> ProbabilityEstimate of count >= k, k >= 1
    pmf: dict  # k -> P(count = k), k >= 0, from consecutive differences
    excluded: bool = False


def count_distribution(trajs: Sequence[Trajectory], target: TargetSet, tau: float, vocab: Vocabulary,
                       hits: Sequence[Sequence[float]] | None = None) -> CountDistribution:
    if tau <= 0:
        raise ValueError("tau must be positive")
    hits = target.all_hit_times(trajs, vocab) if hits is None else hits
    counts = [sum(1 for x in h if x <= tau) for h in hits]
    reached = [t.reached_time >= tau for t in trajs]
    if not any(reached) and not any(counts):
        return CountDistribution({}, {}, excluded=True)
    at_least = {}
    k = 1
    while True:
        num = sum(c >= k for c in counts)
        den = sum((c >= k) or r for c, r in zip(counts, reached))
        at_least[k] = ProbabilityEstimate(num / den if den else None, num, den, len(trajs))
        if num == 0:
            break
        k += 1
    surv = [1.0] + [at_least[k].value if at_least[k].value is not None else 0.0 for k in sorted(at_least)]
    pmf = {k: surv[k] - surv[k + 1] for k in range(len(surv) - 1)}
    return CountDistribution(at_least, pmf)


@dataclass(frozen=True)
class TimeToEvent:
    first_times: tuple  # uncensored first-hit times
    censored_at: tuple  # reached_time of trajectories without a hit
    median: float | None  # None marks exclusion


def time_to_event(trajs: Sequence[Trajectory], target: TargetSet, vocab: Vocabulary,
                  hits: Sequence[Sequence[float]] | None = None) -> TimeToEvent:
    hits = target.all_hit_times(trajs, vocab) if hits is None else hits
    first = tuple(h[0] for h in hits if h)
    censored = tuple(t.reached_time for t, h in zip(trajs, hits) if not h)
    return TimeToEvent(first, censored, float(np.median(first)) if first else None)


# ---------------------------------------------------------------------------
# analytic oracle for the Markov toy model


def markov_oracle(model: MarkovTokenModel, start_state: int, event_state: int, time_state: int,
                  step_seconds: float, tau: float, d: int) -> tuple[float, float]:
    """Exact (E[numerator], E[denominator]) per trajectory for the toy chain.

    State indices refer to ``model.states``; only ``time_state`` advances the
    clock, by ``step_seconds``. Trajectories stop after ``d`` tokens or once
    the clock passes ``tau``.
    """
    k = len(model.states)
    max_ticks = int(math.floor(tau / step_seconds + 1e-9)) + 1  # ticks at which clock > tau
    # dist[s, c]: probability of being alive, no hit yet, last state s, c ticks elapsed
    dist = np.zeros((k, max_ticks + 1))
    dist[start_state, 0] = 1.0
    p_hit = 0.0
    p_reach = 0.0
    for _ in range(d):
        new = np.zeros_like(dist)
        for s in range(k):
            row = model.P[s]
            for c in range(max_ticks):
                mass = dist[s, c]
                if mass == 0:
                    continue
                for b in range(k):
                    pb = mass * row[b]
                    if pb == 0:
                        continue
                    if b == event_state:
                        p_hit += pb  # hit at clock c*step <= tau
                    elif b == time_state:
                        if c + 1 >= max_ticks:
                            p_reach += pb  # clock now beyond tau
                        else:
                            new[b, c + 1] += pb
                    else:
                        new[b, c] += pb
        dist = new
    # survivors after d tokens: reached >= tau counts for clock exactly tau
    for c in range(max_ticks):
        if c * step_seconds >= tau:
            p_reach += dist[:, c].sum()
    return p_hit, p_hit + p_reach


# ---------------------------------------------------------------------------
# persistence


def write_trajectories(path, trajectories: Sequence[tuple[str, Trajectory]], vocab_hash: bytes, context_len: int) -> None:
    seqs = [TokenSequence(name, t.tokens.astype(np.int32), t.times) for name, t in trajectories]
    write_token_file(path, seqs, vocab_hash, context_len)


def write_estimates_csv(fh, rows: Iterable[tuple[str, str, float, ProbabilityEstimate]]) -> None:
    w = csv.writer(fh)
    w.writerow(["patient_id", "target", "tau", "value", "numerator", "denominator"])
    for pid, target, tau, est in rows:
        w.writerow([pid, target, repr(float(tau)), "" if est.value is None else repr(est.value),
                    est.numerator, est.denominator])
