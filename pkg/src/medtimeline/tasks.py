"""Prediction cases for the planted-dependency task: prompt at an encounter end, label over the next horizon."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .sequencer import TokenSequence
from .synthgen import DAY_S, GeneratorConfig, PatientRecord, true_event_probability
from .vocab import MONTH

TWO_YEARS = 24 * MONTH
LAST_EVENT_MARGIN_DAYS = 8  # acute events are never drawn in the final week of follow-up


@dataclass
class PredictionCase:
    patient_id: str
    index: int  # position in the record list
    time: int  # prediction instant (end of an encounter)
    prompt: np.ndarray
    label: bool  # target diagnosis within (time, time + horizon]
    true_probability: float
    has_condition: bool  # conditioning diagnosis present in the prompt record


def _has_code(record: PatientRecord, prefixes: Sequence[str], lo: float, hi: float) -> bool:
    for e in record.encounters:
        for code, _ in e.diagnoses:
            if code.replace(".", "").startswith(prefixes) and lo < e.start <= hi:
                return True
    return False


def build_cases(
    records: Sequence[PatientRecord],
    sequences: Sequence[TokenSequence],
    config: GeneratorConfig,
    event: str = "acute_mi",
    condition: str = "heart_failure",
    horizon: float = TWO_YEARS,
    lookback: float = 12 * MONTH,
) -> list[PredictionCase]:
    """One case per patient with enough observed follow-up after some encounter.

    The prediction point is the end of the first encounter (not the very
    first) that closes at least ``lookback`` after record start and still
    leaves ``horizon`` of follow-up, so prompts cover comparable spans.
    Labels come from observed diagnoses; the true probability comes from the
    generator's hazards starting the day after the prediction point.
    """
    ev_prefixes = tuple(c.replace(".", "")[:3] for c in config.event(event).codes)
    cond_prefixes = tuple(c.replace(".", "")[:3] for c in config.condition(condition).codes)
    n_days = int(round(horizon / DAY_S))
    cases = []
    for idx, (r, s) in enumerate(zip(records, sequences)):
        limit = r.record_end - LAST_EVENT_MARGIN_DAYS * DAY_S - horizon
        eligible = [e for k, e in enumerate(r.encounters)
                    if k >= 1 and r.record_start + lookback <= e.end <= limit]
        if not eligible:
            continue
        T = eligible[0].end
        prompt = s.until(T).tokens
        first_day = (T - r.record_start) // DAY_S + 1
        p = true_event_probability(config, r.latent, event, int(first_day), n_days) if r.latent else float("nan")
        cases.append(PredictionCase(
            patient_id=r.patient_id,
            index=idx,
            time=T,
            prompt=prompt,
            label=_has_code(r, ev_prefixes, T, T + horizon),
            true_probability=p,
            has_condition=_has_code(r, cond_prefixes, -np.inf, T),
        ))
    return cases
