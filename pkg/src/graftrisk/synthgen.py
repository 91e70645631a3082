"""Seeded synthetic transplant cohort whose shape mirrors the real database
this system was designed for: ~1500 patients over 2009-2019, checkups a few
times a year, roughly 100k database entries, and about 12% of snapshots
followed by a severe infection (CRP >= 100 mg/L) within 90 days.

Infections arrive by a per-patient-day hazard modulated by latent risk
factors (low adherence, recent transplant, chronic conditions). Most
episodes are preceded by a prodrome: mildly rising inflammation labs plus
extra lab draws, so that learnable signal exists before the endpoint. With
ablate_signal=True the cohort becomes a true null: uniform hazard, no
prodrome, single isolated spike events; downstream models should score
near chance on it.

Generation is a pure function of the config; identical configs produce
byte-identical NDJSON.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from datetime import date, timedelta
from typing import Iterable, Iterator

import numpy as np

from .cohort import ClinicalEvent
from .errors import ConfigError

LAB_CODES = [
    "CRP", "CREA", "GFR", "UREA", "K", "NA", "HGB", "WBC", "PLT", "TAC",
    "GLU", "ALB", "ALT", "AST", "GGT", "BILI", "CA", "PHOS", "MG", "URIC",
    "CHOL", "LDL", "HDL", "TRIG", "FERR", "B2M", "PTH", "VITD", "CYSC",
    "TRANSF", "FOL", "B12",
]
VITAL_CODES = ["SBP", "DBP", "HR", "TEMP", "WEIGHT", "SPO2"]
MED_CODES = ["TACRO", "MMF", "PRED", "CICLO", "AZA", "SIRO", "ABX",
             "STATIN", "ACEI", "INSULIN"]

# (code, probability at entry, hazard-param key or None)
CHRONIC_DX = [
    ("E11", 0.30, "diabetes"),
    ("I10", 0.50, None),
    ("I50", 0.14, "heart_failure"),
    ("J44", 0.10, "copd"),
    ("B18", 0.08, None),
    ("D64", 0.18, None),
    ("E78", 0.35, None),
    ("M81", 0.15, None),
    ("F32", 0.12, None),
    ("K21", 0.20, None),
    ("N39", 0.15, "recurrent_uti"),
]
TRANSPLANT_DX = "Z94.0"
INFECTION_DX = "A49"

DEFAULT_HAZARD_PARAMS = {
    "low_adherence": 3.0,
    "recent_transplant": 2.0,
    "diabetes": 1.8,
    "heart_failure": 1.4,
    "copd": 1.5,
    "recurrent_uti": 1.7,
}

# Daily base hazard scale; calibrated empirically so the default config
# lands near the 12% 90-day prevalence target (see tests). Below 1.0
# because data points cluster around episodes (prodrome and follow-up
# draws), which inflates snapshot-level prevalence above the patient-day
# rate.
HAZARD_CALIBRATION = 0.16
ABLATED_CALIBRATION = 0.90

EPISODE_REFRACTORY_DAYS = 60
PRODROME_PROBABILITY = 0.65

# Baseline lab setpoints: (location, noise sd as fraction of location)
LAB_BASELINES = {
    "CRP": (3.0, 0.5), "CREA": (1.5, 0.12), "GFR": (52.0, 0.1),
    "UREA": (48.0, 0.15), "K": (4.4, 0.06), "NA": (139.0, 0.015),
    "HGB": (12.5, 0.07), "WBC": (7.0, 0.18), "PLT": (240.0, 0.15),
    "TAC": (7.0, 0.2), "GLU": (104.0, 0.15), "ALB": (4.1, 0.06),
    "ALT": (28.0, 0.3), "AST": (26.0, 0.3), "GGT": (38.0, 0.4),
    "BILI": (0.7, 0.3), "CA": (9.4, 0.04), "PHOS": (3.4, 0.12),
    "MG": (2.0, 0.1), "URIC": (6.4, 0.15), "CHOL": (185.0, 0.12),
    "LDL": (105.0, 0.18), "HDL": (50.0, 0.18), "TRIG": (150.0, 0.3),
    "FERR": (160.0, 0.45), "B2M": (3.2, 0.25), "PTH": (110.0, 0.4),
    "VITD": (24.0, 0.3), "CYSC": (1.5, 0.15), "TRANSF": (240.0, 0.12),
    "FOL": (9.0, 0.3), "B12": (420.0, 0.25),
}
VITAL_BASELINES = {
    "SBP": (132.0, 0.08), "DBP": (82.0, 0.08), "HR": (74.0, 0.1),
    "TEMP": (36.7, 0.008), "WEIGHT": (78.0, 0.02), "SPO2": (97.0, 0.01),
}


@dataclass
class SynthConfig:
    n_patients: int = 1500
    start_year: int = 2009
    end_year: int = 2019
    target_prevalence: float = 0.12
    visits_per_year: float = 3.5
    seed: int = 42
    infection_hazard_params: dict = field(default_factory=lambda: dict(DEFAULT_HAZARD_PARAMS))
    ablate_signal: bool = False
    unit_variant_rate: float = 0.02
    dropped_field_rate: float = 0.01

    def __post_init__(self):
        if self.n_patients < 1:
            raise ConfigError("n_patients must be >= 1")
        if self.end_year < self.start_year:
            raise ConfigError("end_year must be >= start_year")
        if not (0.0 < self.target_prevalence < 1.0):
            raise ConfigError("target_prevalence must be in (0, 1)")
        if self.visits_per_year <= 0:
            raise ConfigError("visits_per_year must be > 0")
        if not (0 <= self.seed < 2 ** 64):
            raise ConfigError("seed must be a 64-bit unsigned integer")
        for name, mult in self.infection_hazard_params.items():
            if mult <= 0:
                raise ConfigError(f"infection_hazard_params[{name!r}] must be positive")
        if not (0.0 <= self.unit_variant_rate < 1.0):
            raise ConfigError("unit_variant_rate must be in [0, 1)")
        if not (0.0 <= self.dropped_field_rate < 1.0):
            raise ConfigError("dropped_field_rate must be in [0, 1)")


@dataclass(frozen=True)
class PatientProfile:
    patient_id: str
    sex: int  # 0 female, 1 male
    birth_date: date
    transplant_date: date
    exit_date: date
    chronic_conditions: frozenset[str]
    adherence: float


def _span(config: SynthConfig) -> tuple[date, date]:
    return date(config.start_year, 1, 1), date(config.end_year, 12, 31)


def _make_profile(pid: str, config: SynthConfig, rng: np.random.Generator) -> PatientProfile:
    start, end = _span(config)
    span_days = (end - start).days
    entry_off = int(rng.integers(0, max(1, span_days - 180)))
    entry = start + timedelta(days=entry_off)
    followup = 180 + rng.exponential(2.2 * 365)
    exit_date = min(end, entry + timedelta(days=int(followup)))
    age = float(np.clip(rng.normal(52, 13), 18, 80))
    birth = date(max(1900, entry.year - int(age)), int(rng.integers(1, 13)), int(rng.integers(1, 29)))
    chronic = frozenset(
        code for code, p, _ in CHRONIC_DX if rng.random() < p
    )
    return PatientProfile(
        patient_id=pid,
        sex=int(rng.random() < 0.62),
        birth_date=birth,
        transplant_date=entry,
        exit_date=exit_date,
        chronic_conditions=chronic,
        adherence=float(rng.beta(7, 2)),
    )


def _hazard_multiplier(profile: PatientProfile, day_offset: int, params: dict) -> float:
    m = 1.0 + params.get("low_adherence", 0.0) * (1.0 - profile.adherence)
    if day_offset < 180:
        m *= params.get("recent_transplant", 1.0)
    for code, _, key in CHRONIC_DX:
        if key and code in profile.chronic_conditions:
            m *= params.get(key, 1.0)
    return m


def _episode_days(profile: PatientProfile, config: SynthConfig,
                  rng: np.random.Generator) -> list[int]:
    """Episode onset days (offsets from entry) from a daily Bernoulli hazard
    with a refractory gap."""
    n_days = (profile.exit_date - profile.transplant_date).days
    if n_days <= 30:
        return []
    base = -np.log(1.0 - config.target_prevalence) / 90.0
    if config.ablate_signal:
        daily = np.full(n_days, base * ABLATED_CALIBRATION)
    else:
        m_early = _hazard_multiplier(profile, 0, config.infection_hazard_params)
        m_late = _hazard_multiplier(profile, 180, config.infection_hazard_params)
        # normalize by the cohort-average multiplier so target prevalence is
        # insensitive to the hazard parameter choice
        mean_mult = 1.0 + config.infection_hazard_params.get("low_adherence", 0.0) * 0.22
        daily = np.full(n_days, base * HAZARD_CALIBRATION / mean_mult)
        daily[:180] *= m_early
        daily[180:] *= m_late
    hits = np.flatnonzero(rng.random(n_days) < daily)
    episodes: list[int] = []
    for day in hits:
        if day < 30:
            continue
        if episodes and day - episodes[-1] < EPISODE_REFRACTORY_DAYS:
            continue
        episodes.append(int(day))
    return episodes


def _visit_days(profile: PatientProfile, config: SynthConfig,
                rng: np.random.Generator) -> list[int]:
    n_days = (profile.exit_date - profile.transplant_date).days
    days = [0]
    t = 0.0
    mean_gap = 365.0 / config.visits_per_year
    while True:
        t += max(5.0, rng.gamma(2.0, mean_gap / 2.0))
        if t > n_days:
            break
        days.append(int(t))
    return days


def _lab_value(code: str, rng: np.random.Generator) -> float:
    loc, rel = LAB_BASELINES[code]
    if code == "CRP":
        return float(np.exp(rng.normal(np.log(3.0), 0.5)))
    return max(0.1, float(rng.normal(loc, rel * loc)))


def _vital_value(code: str, rng: np.random.Generator) -> float:
    loc, rel = VITAL_BASELINES[code]
    return max(0.1, float(rng.normal(loc, rel * loc)))


def _round(code: str, value: float) -> float:
    if code in ("NA", "SBP", "DBP", "HR", "PLT", "CHOL", "LDL", "HDL", "TRIG",
                "FERR", "B12", "GLU", "UREA", "GFR", "TRANSF", "PTH", "SPO2"):
        return float(round(value))
    return float(round(value, 2))


class _PatientEmitter:
    """Builds one patient's event list; the emit counter keeps same-day
    events in a stable, reproducible order."""

    def __init__(self, profile: PatientProfile, config: SynthConfig,
                 rng: np.random.Generator):
        self.profile = profile
        self.config = config
        self.rng = rng
        self.events: list[tuple[int, int, ClinicalEvent]] = []
        self._seq = 0

    def emit(self, day: int, kind: str, code: str, value=None, unit=None):
        ts = self.profile.transplant_date + timedelta(days=day)
        ev = ClinicalEvent(self.profile.patient_id, ts, kind, code, value, unit)
        self.events.append((day, self._seq, ev))
        self._seq += 1

    def emit_lab(self, day: int, code: str, value: float):
        value = _round(code, value)
        unit = "mg/L" if code == "CRP" else None
        if code == "CRP":
            r = self.rng.random()
            if r < self.config.unit_variant_rate:
                value = round(value / 10.0, 3)
                unit = "mg/dL"
            elif r < self.config.unit_variant_rate + 0.7 * self.config.dropped_field_rate:
                unit = None
        elif self.rng.random() < 0.3 * self.config.dropped_field_rate:
            # drop the value: ingest will count and discard this line
            self.emit(day, "lab", code, None, unit)
            return
        self.emit(day, "lab", code, value, unit)

    def sorted_events(self) -> list[ClinicalEvent]:
        return [ev for _, _, ev in sorted(self.events, key=lambda t: (t[0], t[1]))]


def _generate_patient(profile: PatientProfile, config: SynthConfig,
                      rng: np.random.Generator) -> list[ClinicalEvent]:
    out = _PatientEmitter(profile, config, rng)
    p = profile

    out.emit(0, "demographic", "sex", float(p.sex))
    out.emit(0, "demographic", "birth_year", float(p.birth_date.year))
    out.emit(0, "demographic", "transplant")
    out.emit(0, "diagnosis", TRANSPLANT_DX)
    for code in sorted(p.chronic_conditions):
        out.emit(0, "diagnosis", code)

    n_days = (p.exit_date - p.transplant_date).days
    episodes = _episode_days(p, config, rng)
    prodromes: dict[int, int] = {}
    if not config.ablate_signal:
        for ep in episodes:
            if rng.random() < PRODROME_PROBABILITY:
                prodromes[ep] = int(rng.integers(14, 50))

    # benign inflammation bumps: sub-threshold CRP elevations with their own
    # follow-up draws, so lab frequency alone cannot separate the classes
    benign_days: list[int] = []
    if not config.ablate_signal:
        n_benign = int(rng.poisson(0.35 * n_days / 365.0))
        benign_days = sorted(int(rng.integers(0, n_days)) for _ in range(n_benign))

    visit_days = set(_visit_days(p, config, rng))
    if not config.ablate_signal:
        for b in benign_days:
            for _ in range(1 + int(rng.random() < 0.5)):
                d = b + int(rng.integers(0, 10))
                if d < n_days:
                    visit_days.add(d)
        for ep, length in prodromes.items():
            for _ in range(1 + int(rng.random() < 0.35)):
                d = ep - int(rng.integers(1, length + 1))
                if 0 <= d < n_days:
                    visit_days.add(d)
        for ep in episodes:
            for _ in range(1 + int(rng.integers(0, 2))):
                d = ep + int(rng.integers(0, 10))
                if d < n_days:
                    visit_days.add(d)
            d = ep + 10 + int(rng.integers(0, 18))
            if d < n_days:
                visit_days.add(d)

    # guaranteed endpoint evidence: 1-3 elevated CRP draws per episode
    for ep in episodes:
        if config.ablate_signal:
            out.emit_lab(ep, "CRP", float(rng.uniform(110.0, 300.0)))
            continue
        n_draws = 1 + int(rng.integers(0, 3))
        out.emit_lab(ep, "CRP", float(rng.uniform(110.0, 320.0)))
        for k in range(1, n_draws):
            d = ep + int(rng.integers(2, 10))
            if d < n_days:
                out.emit_lab(d, "CRP", float(rng.uniform(100.0, 250.0)))
        out.emit(ep, "medication", "ABX")
        if rng.random() < 0.5:
            out.emit(ep + 1 if ep + 1 < n_days else ep, "diagnosis", INFECTION_DX)

    wbc_base = max(3.0, float(rng.normal(7.0, 1.2)))
    crea_base = max(0.6, float(rng.normal(1.5, 0.3)))
    tac_base = max(3.0, float(rng.normal(7.0, 1.2)))

    def state_of(day: int) -> tuple[str, float]:
        for ep in episodes:
            if ep <= day <= ep + 10:
                return "acute", 1.0
            if ep + 10 < day <= ep + 30:
                return "recovery", (day - ep - 10) / 20.0
            length = prodromes.get(ep)
            if length and ep - length <= day < ep:
                return "prodrome", 1.0 - (ep - day) / length
        for b in benign_days:
            if b <= day <= b + 12:
                return "benign", 1.0 - (day - b) / 12.0
        return "routine", 0.0

    for day in sorted(visit_days):
        state, progress = ("routine", 0.0) if config.ablate_signal else state_of(day)
        annual = rng.random() < 0.22

        if rng.random() < (0.95 if state != "routine" else 0.75):
            crp = _lab_value("CRP", rng)
            if state == "prodrome":
                crp = min(95.0, crp * float(rng.uniform(2.0, 8.0)) * (0.3 + 0.7 * progress))
            elif state == "acute":
                crp = float(rng.uniform(105.0, 300.0))
            elif state == "recovery":
                crp = float(rng.uniform(15.0, 80.0)) * (1.0 - 0.7 * progress)
            elif state == "benign":
                crp = min(92.0, crp * float(rng.uniform(3.0, 15.0)) * (0.3 + 0.7 * progress))
            elif rng.random() < 0.09:
                # benign bumps keep a bare CRP cutoff from being a free lunch
                crp = min(90.0, crp * float(rng.uniform(3.0, 10.0)))
            out.emit_lab(day, "CRP", crp)

        if rng.random() < 0.55:
            out.emit_lab(day, "CREA", crea_base * float(rng.normal(1.0, 0.1)))
        if rng.random() < 0.40:
            tac = tac_base * float(rng.normal(1.0, 0.15))
            if state == "prodrome":
                tac *= float(rng.uniform(1.05, 1.4))
            if p.adherence < 0.6 and rng.random() < 0.4:
                tac *= float(rng.uniform(0.4, 0.8))
            out.emit_lab(day, "TAC", tac)
        wbc_p = {"routine": 0.28, "prodrome": 0.75, "acute": 0.9, "recovery": 0.5,
                 "benign": 0.6}[state]
        if rng.random() < wbc_p:
            wbc = wbc_base * float(rng.normal(1.0, 0.12))
            if state == "prodrome":
                wbc *= 1.0 + 0.5 * progress
            elif state == "acute":
                wbc *= float(rng.uniform(1.6, 2.4))
            elif state == "recovery":
                wbc *= float(rng.uniform(1.1, 1.5))
            elif state == "benign":
                wbc *= float(rng.uniform(1.05, 1.5))
            out.emit_lab(day, "WBC", wbc)
        for code, prob in (("GFR", 0.22), ("HGB", 0.22), ("K", 0.10), ("NA", 0.10),
                           ("UREA", 0.10), ("PLT", 0.08), ("GLU", 0.10), ("ALB", 0.08)):
            if rng.random() < prob:
                out.emit_lab(day, code, _lab_value(code, rng))
        if annual:
            for code in ("ALT", "AST", "GGT", "BILI", "CA", "PHOS", "MG", "URIC",
                         "CHOL", "LDL", "HDL", "TRIG", "FERR", "B2M", "PTH", "VITD",
                         "CYSC", "TRANSF", "FOL", "B12"):
                if rng.random() < 0.30:
                    out.emit_lab(day, code, _lab_value(code, rng))

        if rng.random() < 0.30:
            out.emit(day, "vital", "SBP", _round("SBP", _vital_value("SBP", rng)))
            out.emit(day, "vital", "DBP", _round("DBP", _vital_value("DBP", rng)))
        if rng.random() < 0.15:
            out.emit(day, "vital", "HR", _round("HR", _vital_value("HR", rng)))
        temp_p = {"routine": 0.12, "prodrome": 0.4, "acute": 0.8, "recovery": 0.3,
                 "benign": 0.3}[state]
        if rng.random() < temp_p:
            t = _vital_value("TEMP", rng)
            if state == "acute":
                t += float(rng.uniform(1.0, 2.5))
            elif state == "prodrome":
                t += float(rng.uniform(0.0, 0.8)) * progress
            out.emit(day, "vital", "TEMP", _round("TEMP", t))
        if rng.random() < 0.20:
            out.emit(day, "vital", "WEIGHT", _round("WEIGHT", _vital_value("WEIGHT", rng)))
        if rng.random() < 0.06:
            out.emit(day, "vital", "SPO2", _round("SPO2", _vital_value("SPO2", rng)))

        for code, prob in (("TACRO", 0.25), ("MMF", 0.18), ("PRED", 0.20),
                           ("CICLO", 0.04), ("AZA", 0.03), ("SIRO", 0.03),
                           ("STATIN", 0.08), ("ACEI", 0.10)):
            if rng.random() < prob:
                out.emit(day, "medication", code)
        if "E11" in p.chronic_conditions and rng.random() < 0.25:
            out.emit(day, "medication", "INSULIN")

    return out.sorted_events()


def generate_cohort(config: SynthConfig) -> list[ClinicalEvent]:
    """Generate the full event stream; a pure function of the config."""
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_patients)
    width = max(4, len(str(config.n_patients)))
    events: list[ClinicalEvent] = []
    for i in range(config.n_patients):
        rng = np.random.default_rng(seeds[i])
        pid = f"p{i + 1:0{width}d}"
        profile = _make_profile(pid, config, rng)
        events.extend(_generate_patient(profile, config, rng))
    return events


def events_to_ndjson(events: Iterable[ClinicalEvent]) -> str:
    return "".join(ev.to_json_line() + "\n" for ev in events)
