"""Seeded synthetic longitudinal patient records with planted structure.

Each patient follows a per-day Markov process: chronic conditions switch on
with a constant daily hazard and stay on, and acute events fire with a daily
probability that is multiplied by the patient's active conditions and scaled
by a static latent severity. Encounters, codes and lab values are rendered
from that latent path. Because the hazards are explicit, marginal
prevalences and conditional event probabilities are computable from the
config alone (see :func:`analytic_prevalence` and
:func:`true_event_probability`), which is what the tests and acceptance
checks lean on.

Codes follow real ICD-10-CM / ATC / LOINC / CPT shapes so the tokenizer's
splitting rules see realistic input.
"""

from __future__ import annotations

import datetime as dt
import json
import math
from dataclasses import asdict, dataclass, field
from typing import IO, Iterable, Iterator

import numpy as np

DAY_S = 86400
YEAR_DAYS = 365.25
TWO_YEARS_S = int(2 * YEAR_DAYS * DAY_S)
FACE_TO_FACE = frozenset({"office", "emergency", "inpatient"})
SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# Records


@dataclass
class Encounter:
    type: str
    department: str
    start: int
    end: int
    complaints: list = field(default_factory=list)  # [name, location-or-None]
    diagnoses: list = field(default_factory=list)  # [icd, "YYYY-MM-DD"]
    labs: list = field(default_factory=list)  # [component, unit, value, instant]
    medications: list = field(default_factory=list)  # [atc, instant]
    procedures: list = field(default_factory=list)  # [code, instant]


@dataclass
class PatientRecord:
    patient_id: str
    sex: str
    race: str
    birth_year: int
    record_start: int
    record_end: int
    encounters: list[Encounter] = field(default_factory=list)
    latent: dict = field(default_factory=dict)  # generator ground truth, never tokenized

    def to_json(self) -> str:
        d = asdict(self)
        d["schema"] = SCHEMA_VERSION
        return json.dumps(d, separators=(",", ":"), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "PatientRecord":
        d = json.loads(line)
        schema = d.pop("schema", None)
        if schema != SCHEMA_VERSION:
            raise SchemaError(f"record schema {schema!r}, expected {SCHEMA_VERSION}")
        encs = [Encounter(**e) for e in d.pop("encounters")]
        return cls(encounters=encs, **d)

    def age_at(self, instant: int) -> float:
        year = dt.datetime.fromtimestamp(instant, dt.timezone.utc).year
        return year - self.birth_year


class SchemaError(ValueError):
    pass


def write_records(records: Iterable[PatientRecord], fh: IO[str]) -> int:
    n = 0
    for r in records:
        fh.write(r.to_json() + "\n")
        n += 1
    return n


def read_records(fh: IO[str]) -> Iterator[PatientRecord]:
    for line in fh:
        if line.strip():
            yield PatientRecord.from_json(line)


# ---------------------------------------------------------------------------
# Config


@dataclass(frozen=True)
class LabSpec:
    component: str  # LOINC
    unit: str
    mean: float
    sd: float
    severity_loading: float = 0.0  # correlation of the value with latent severity
    shift: tuple = ()  # (condition, shift in sd units) pairs


@dataclass(frozen=True)
class ChronicCondition:
    name: str
    codes: tuple[str, ...]
    baseline_prevalence: float
    one_year_onset: float
    medications: tuple[str, ...] = ()
    labs: tuple[str, ...] = ()
    department: str = "Internal Medicine"


@dataclass(frozen=True)
class AcuteEvent:
    name: str
    codes: tuple[str, ...]
    one_year_probability: float  # at severity 0 with no active condition
    encounter: str = "emergency"
    department: str = "Emergency Medicine"
    complaint: tuple = ("Pain", None)
    multipliers: tuple = ()  # (condition, hazard multiplier) pairs
    severity_effect: float = 0.0  # log-hazard per unit severity
    labs: tuple[str, ...] = ()
    medications: tuple[str, ...] = ()
    procedures: tuple[str, ...] = ()
    admit_probability: float = 0.0


LABS = (
    LabSpec("2160-0", "mg/dL", 1.0, 0.25, severity_loading=0.9),  # creatinine
    LabSpec("2345-7", "mg/dL", 100.0, 15.0, severity_loading=0.4, shift=(("diabetes", 2.0),)),  # glucose
    LabSpec("4548-4", "%", 5.6, 0.5, severity_loading=0.3, shift=(("diabetes", 3.0),)),  # HbA1c
    LabSpec("2093-3", "mg/dL", 190.0, 30.0, severity_loading=0.2, shift=(("hyperlipidemia", 1.5),)),
    LabSpec("30934-4", "pg/mL", 80.0, 40.0, severity_loading=0.6, shift=(("heart_failure", 3.0),)),  # BNP
    LabSpec("10839-9", "ng/mL", 0.02, 0.01, severity_loading=0.3, shift=(("acute_mi", 6.0),)),  # troponin
    LabSpec("2823-3", "mmol/L", 4.2, 0.4, severity_loading=0.5),  # potassium
)

CHRONIC = (
    ChronicCondition("heart_failure", ("I50.9", "I50.22", "I50.32"), 0.20, 0.10,
                     medications=("C03CA01", "C07AB07"), labs=("30934-4",), department="Cardiology"),
    ChronicCondition("diabetes", ("E11.9", "E11.65", "E11.40"), 0.15, 0.02,
                     medications=("A10BA02",), labs=("4548-4", "2345-7"), department="Endocrinology"),
    ChronicCondition("hypertension", ("I10",), 0.30, 0.03, medications=("C09AA05", "C08CA01")),
    ChronicCondition("hyperlipidemia", ("E78.5", "E78.00"), 0.25, 0.03, medications=("C10AA05",),
                     labs=("2093-3",)),
    ChronicCondition("ckd", ("N18.3", "N18.2"), 0.08, 0.01, labs=("2160-0",), department="Nephrology"),
)

ACUTE = (
    AcuteEvent("acute_mi", ("I21.4", "I21.9", "I21.A1"), 0.001, complaint=("Chest Pain", "Chest"),
               multipliers=(("heart_failure", 5.0),), severity_effect=4.0,
               labs=("10839-9", "2160-0"), medications=("B01AC06",), procedures=("93010",),
               admit_probability=0.15),
    AcuteEvent("uri", ("J06.9",), 0.25, encounter="office", department="Family Medicine",
               complaint=("Cough", None), medications=("J01CA04",)),
    AcuteEvent("ankle_injury", ("S93.401A",), 0.04, complaint=("Ankle Pain", "Ankle"),
               procedures=("73610",)),
    AcuteEvent("uti", ("N39.0",), 0.08, encounter="office", department="Family Medicine",
               complaint=("Dysuria", None), medications=("J01MA02",)),
)


@dataclass(frozen=True)
class GeneratorConfig:
    seed: int = 0
    n_patients: int = 1000
    followup_days: int = 5 * 365
    start_years: tuple[int, int] = (2012, 2017)
    age_range: tuple[int, int] = (18, 85)
    office_visits_per_year: float = 2.5
    visits_per_condition: float = 0.6  # relative rate increase per active condition
    visit_severity_effect: float = 0.3  # log-rate per unit severity
    telehealth_fraction: float = 0.1
    chronic: tuple[ChronicCondition, ...] = CHRONIC
    acute: tuple[AcuteEvent, ...] = ACUTE
    labs: tuple[LabSpec, ...] = LABS
    general_labs: tuple[str, ...] = ("2160-0", "2823-3")
    general_lab_probability: float = 0.7
    coding_probability: float = 0.9  # chronic condition coded at a visit
    medication_probability: float = 0.6

    def __post_init__(self):
        for c in self.chronic:
            if not (0 <= c.baseline_prevalence < 1 and 0 < c.one_year_onset < 1):
                raise ValueError(f"condition {c.name}: probabilities must be in (0, 1)")
        for a in self.acute:
            if not 0 < a.one_year_probability < 1:
                raise ValueError(f"event {a.name}: hazard must be positive")
            for _, m in a.multipliers:
                if m < 1:
                    raise ValueError(f"event {a.name}: planted multipliers must be >= 1")

    def condition(self, name: str) -> ChronicCondition:
        return next(c for c in self.chronic if c.name == name)

    def event(self, name: str) -> AcuteEvent:
        return next(a for a in self.acute if a.name == name)

    def lab(self, component: str) -> LabSpec:
        return next(lab for lab in self.labs if lab.component == component)


def daily_onset_probability(one_year: float) -> float:
    return 1.0 - (1.0 - one_year) ** (1.0 / 365.0)


def daily_hazard(one_year: float) -> float:
    return -math.log1p(-one_year) / 365.0


def analytic_prevalence(condition: ChronicCondition, day: int) -> float:
    """P(condition active on ``day``) under the generator's onset process."""
    h = daily_onset_probability(condition.one_year_onset)
    return 1.0 - (1.0 - condition.baseline_prevalence) * (1.0 - h) ** (day + 1)


# ---------------------------------------------------------------------------
# Latent process


def patient_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def patient_id(index: int) -> str:
    return f"P{index:07d}"


def draw_latent(config: GeneratorConfig, index: int, rng: np.random.Generator | None = None) -> dict:
    """Latent trajectory for one patient: demographics, severity, onset days, acute days.

    ``onset[c]`` is the first day the condition is active (0 when present at
    record start, None when it never switches on inside follow-up).
    """
    rng = rng or patient_rng(config.seed, index)
    F = config.followup_days
    lo, hi = config.start_years
    start = dt.date(int(rng.integers(lo, hi)), 1, 1) + dt.timedelta(days=int(rng.integers(0, 365)))
    age = int(rng.integers(config.age_range[0], config.age_range[1] + 1))
    sex = "Female" if rng.random() < 0.52 else "Male"
    if rng.random() < 0.01:
        sex = "Unknown"
    race = ["White", "Black or African American", "Asian", "Other", "Unknown"][
        int(rng.choice(5, p=[0.62, 0.14, 0.08, 0.1, 0.06]))
    ]
    severity = float(rng.standard_normal())

    onset: dict[str, int | None] = {}
    active = np.zeros((len(config.chronic), F), dtype=bool)
    for k, c in enumerate(config.chronic):
        if rng.random() < c.baseline_prevalence:
            day = 0
        else:
            day = int(rng.geometric(daily_onset_probability(c.one_year_onset))) - 1
        onset[c.name] = day if day < F else None
        if day < F:
            active[k, day:] = True
    names = [c.name for c in config.chronic]

    acute: dict[str, list[int]] = {}
    for a in config.acute:
        log_h = np.full(F, math.log(daily_hazard(a.one_year_probability)) + a.severity_effect * severity)
        for cname, mult in a.multipliers:
            log_h += math.log(mult) * active[names.index(cname)]
        p = -np.expm1(-np.exp(log_h))
        days = np.flatnonzero(rng.random(F) < p)
        acute[a.name] = [int(d) for d in days if d < F - 7]

    n_active = active.sum(axis=0)
    rate = (
        config.office_visits_per_year / YEAR_DAYS
        * (1.0 + config.visits_per_condition * n_active)
        * math.exp(config.visit_severity_effect * severity)
    )
    visits = [int(d) for d in np.flatnonzero(rng.random(F) < np.minimum(rate, 1.0))]
    return {
        "start_date": start.isoformat(),
        "age": age,
        "sex": sex,
        "race": race,
        "severity": severity,
        "onset": onset,
        "acute": acute,
        "visits": visits,
    }


def true_event_probability(
    config: GeneratorConfig, latent: dict, event: str, first_day: int, n_days: int
) -> float:
    """Exact P(at least one ``event`` on days [first_day, first_day + n_days)).

    Conditions already active stay active; conditions not yet active may
    switch on inside the window, which is integrated over exactly.
    """
    a = config.event(event)
    days = np.arange(first_day, first_day + n_days)
    base = math.log(daily_hazard(a.one_year_probability)) + a.severity_effect * latent["severity"]
    # split multipliers into already-active and still-latent conditions
    log_h = np.full(n_days, base)
    pending = []
    for cname, mult in a.multipliers:
        o = latent["onset"].get(cname)
        if o is not None and o < first_day:
            log_h += math.log(mult)
        else:
            pending.append((config.condition(cname), mult))
    if not pending:
        return float(-np.expm1(-np.exp(log_h).sum()))
    if len(pending) > 1:
        raise NotImplementedError("more than one latent multiplier condition")
    cond, mult = pending[0]
    h = daily_onset_probability(cond.one_year_onset)
    haz0 = np.exp(log_h)
    haz1 = haz0 * mult
    # onset inside window at offset k (condition absent on all earlier days by assumption of absence)
    k = np.arange(n_days)
    p_onset = (1 - h) ** k * h  # relative to the first window day
    # survival if onset at offset k: exp(-(sum haz0[:k] + sum haz1[k:]))
    c0 = np.concatenate([[0.0], np.cumsum(haz0)])
    c1 = np.concatenate([[0.0], np.cumsum(haz1)])
    surv_k = np.exp(-(c0[k] + (c1[-1] - c1[k])))
    surv_never = math.exp(-c0[-1])
    p_never = (1 - h) ** n_days
    survival = float((p_onset * surv_k).sum() + p_never * surv_never)
    return 1.0 - survival


# ---------------------------------------------------------------------------
# Rendering


def _iso(instant: int) -> str:
    return dt.datetime.fromtimestamp(instant, dt.timezone.utc).date().isoformat()


def _lab_value(spec: LabSpec, severity: float, active: set[str], rng: np.random.Generator) -> float:
    z = spec.severity_loading * severity + math.sqrt(1 - spec.severity_loading**2) * rng.standard_normal()
    z += sum(s for cname, s in spec.shift if cname in active)
    return round(float(spec.mean + spec.sd * z), 3)


def _render(config: GeneratorConfig, index: int, latent: dict, rng: np.random.Generator) -> PatientRecord:
    start_date = dt.date.fromisoformat(latent["start_date"])
    day0 = int(dt.datetime(start_date.year, start_date.month, start_date.day, tzinfo=dt.timezone.utc).timestamp())
    F = config.followup_days
    severity = latent["severity"]
    onset = latent["onset"]

    def active_on(day: int) -> set[str]:
        return {c for c, o in onset.items() if o is not None and o <= day}

    def add_labs(enc: Encounter, components, t0: int, act: set[str]):
        for comp in components:
            spec = config.lab(comp)
            t0 += int(rng.integers(60, 600))
            enc.labs.append([spec.component, spec.unit, _lab_value(spec, severity, act, rng), t0])

    encounters: list[Encounter] = []
    for day in latent["visits"]:
        act = active_on(day)
        t = day0 + day * DAY_S + int(rng.integers(8 * 3600, 17 * 3600))
        virtual = rng.random() < config.telehealth_fraction
        conds = [c for c in config.chronic if c.name in act]
        dept = conds[int(rng.integers(len(conds)))].department if conds and rng.random() < 0.4 else (
            "Family Medicine" if rng.random() < 0.6 else "Internal Medicine")
        enc = Encounter("telehealth" if virtual else "office", dept, t, t + int(rng.integers(15, 45)) * 60)
        if rng.random() < 0.3:
            enc.complaints.append(["Follow-up", None])
        date = _iso(t)
        for c in conds:
            if rng.random() < config.coding_probability:
                code = c.codes[0] if rng.random() < 0.7 else c.codes[int(rng.integers(len(c.codes)))]
                enc.diagnoses.append([code, date])
        if not virtual:
            comps = [lab for lab in config.general_labs if rng.random() < config.general_lab_probability]
            for c in conds:
                comps.extend(lab for lab in c.labs if lab not in comps and rng.random() < 0.8)
            add_labs(enc, comps, t, act)
            enc.procedures.append(["99214" if len(conds) >= 2 else "99213", t])
        for c in conds:
            for med in c.medications:
                if rng.random() < config.medication_probability:
                    enc.medications.append([med, t + int(rng.integers(5, 14)) * 60])
        encounters.append(enc)

    for a in config.acute:
        for day in latent["acute"][a.name]:
            act = active_on(day)
            t = day0 + day * DAY_S + int(rng.integers(0, 20 * 3600))
            hours = int(rng.integers(2, 8)) if a.encounter == "emergency" else 0
            end = t + hours * 3600 + int(rng.integers(20, 50)) * 60
            name, loc = a.complaint
            enc = Encounter(a.encounter, a.department, t, end, complaints=[[name, loc]])
            code = a.codes[0] if rng.random() < 0.6 else a.codes[int(rng.integers(len(a.codes)))]
            enc.diagnoses.append([code, _iso(t)])
            for c in config.chronic:
                if c.name in act and rng.random() < 0.5:
                    enc.diagnoses.append([c.codes[0], _iso(t)])
            add_labs(enc, a.labs, t, act | {a.name})
            for med in a.medications:
                enc.medications.append([med, t + int(rng.integers(10, 40)) * 60])
            for proc in a.procedures:
                enc.procedures.append([proc, t + int(rng.integers(5, 30)) * 60])
            encounters.append(enc)
            if rng.random() < a.admit_probability:
                encounters.append(_inpatient(config, a, end, act, severity, rng))

    encounters = [e for e in encounters if e.end <= day0 + F * DAY_S]
    encounters.sort(key=lambda e: (e.start, e.end, e.type))
    for e in encounters:
        e.labs.sort(key=lambda x: x[3])
        e.medications.sort(key=lambda x: x[1])
        e.procedures.sort(key=lambda x: x[1])
    birth_year = start_date.year - latent["age"]
    return PatientRecord(
        patient_id=patient_id(index),
        sex=latent["sex"],
        race=latent["race"],
        birth_year=birth_year,
        record_start=day0,
        record_end=day0 + F * DAY_S,
        encounters=encounters,
        latent=latent,
    )


def _inpatient(config, a: AcuteEvent, t: int, act, severity, rng) -> Encounter:
    nights = int(rng.integers(1, 5))
    end_day = (t // DAY_S + nights) * DAY_S + int(rng.integers(9, 15)) * 3600
    enc = Encounter("inpatient", "Cardiology", t, end_day)
    enc.diagnoses.append([a.codes[0], _iso(t)])
    # a secondary code documented on the next day lands at that midnight
    enc.diagnoses.append(["I25.10", _iso(t + DAY_S)])
    morning = (t // DAY_S + 1) * DAY_S + 6 * 3600
    for k in range(nights):
        m = morning + k * DAY_S
        for comp in a.labs:
            spec = config.lab(comp)
            m += int(rng.integers(60, 600))
            enc.labs.append([spec.component, spec.unit, _lab_value(spec, severity, set(act) | {a.name}, rng), m])
    enc.procedures.append(["93458", morning + 3 * 3600])
    enc.medications.append(["C10AA05", t + 3600])
    return enc


def generate_patient(config: GeneratorConfig, index: int) -> PatientRecord:
    rng = patient_rng(config.seed, index)
    latent = draw_latent(config, index, rng)
    return _render(config, index, latent, rng)


def generate_population(config: GeneratorConfig) -> Iterator[PatientRecord]:
    """Stream ``config.n_patients`` records; patient i depends only on (seed, i)."""
    for i in range(config.n_patients):
        yield generate_patient(config, i)


# ---------------------------------------------------------------------------
# Inclusion


def passes_inclusion(record: PatientRecord) -> bool:
    f2f = [e for e in record.encounters if e.type in FACE_TO_FACE]
    if not f2f:
        return False
    age = record.age_at(record.encounters[0].start)
    if not 18 <= age <= 120:
        return False
    starts = sorted(e.start for e in f2f)
    return any(b - a <= TWO_YEARS_S for a, b in zip(starts, starts[1:]))


def apply_inclusion_filter(records: Iterable[PatientRecord]) -> Iterator[PatientRecord]:
    """Keep adults with two successive face-to-face encounters within two years."""
    for r in records:
        if passes_inclusion(r):
            yield r
