"""Clinical event ingestion, data-point materialization and endpoint labeling.

The NDJSON event format (one JSON object per line) is the contract between
the synthetic generator, this module and the CLI:

    {"patient_id": str, "timestamp": "YYYY-MM-DD",
     "kind": "lab|vital|medication|diagnosis|demographic",
     "code": str, "value": number (optional), "unit": str (optional)}

Unknown fields are ignored. A data point is created for every ingested
event; its label is decided by scanning CRP lab values in the lookahead
window (t, t + window_days].
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import date, timedelta
from typing import Iterable, Iterator, Optional

import numpy as np

from .errors import (
    EmptyCohortError,
    EmptyDatasetError,
    IngestError,
    PatientLookupError,
)

KINDS = ("lab", "vital", "medication", "diagnosis", "demographic")

CRP_CODE = "CRP"
CRP_THRESHOLD_MG_L = 100.0

# Unit conversion factors to the canonical unit, per code. CRP is stored in
# mg/L; legacy entries in mg/dL are multiplied by 10.
UNIT_FACTORS = {
    (CRP_CODE, "mg/L"): 1.0,
    (CRP_CODE, "mg/dL"): 10.0,
}

TIMESTAMP_MIN = date(1900, 1, 1)
TIMESTAMP_MAX = date(2100, 1, 1)

# Hard ingest failure above this malformed-line fraction; a file that is
# >10% garbage is almost certainly the wrong file.
MAX_MALFORMED_FRACTION = 0.10

POSITIVE = "positive"
NEGATIVE = "negative"
CENSORED = "censored"


@dataclass(frozen=True)
class ClinicalEvent:
    """One timestamped record from the patient database (day resolution)."""

    patient_id: str
    timestamp: date
    kind: str
    code: str
    value: Optional[float] = None
    unit: Optional[str] = None

    def to_json_line(self) -> str:
        obj = {
            "patient_id": self.patient_id,
            "timestamp": self.timestamp.isoformat(),
            "kind": self.kind,
            "code": self.code,
        }
        if self.value is not None:
            obj["value"] = self.value
        if self.unit is not None:
            obj["unit"] = self.unit
        return json.dumps(obj, separators=(",", ":"))


@dataclass
class IngestReport:
    accepted: int = 0
    dropped: int = 0
    converted: int = 0

    def as_dict(self) -> dict:
        return {
            "accepted": self.accepted,
            "dropped": self.dropped,
            "converted": self.converted,
        }


class EventStore:
    """Per-patient, time-ordered event sequences. Immutable after ingest.

    Events are sorted by (timestamp, stable input order) within each
    patient; CRP values are already normalized to mg/L.
    """

    def __init__(self, events_by_patient: dict[str, list[ClinicalEvent]], converted: int = 0):
        self._events = events_by_patient
        self.converted = converted

    def patients(self) -> list[str]:
        return sorted(self._events)

    def __contains__(self, patient_id: str) -> bool:
        return patient_id in self._events

    def __len__(self) -> int:
        return sum(len(evs) for evs in self._events.values())

    def events_for(self, patient_id: str) -> list[ClinicalEvent]:
        try:
            return self._events[patient_id]
        except KeyError:
            raise PatientLookupError(f"unknown patient {patient_id!r}") from None

    def all_events(self) -> Iterator[ClinicalEvent]:
        for pid in self.patients():
            yield from self._events[pid]

    def last_timestamp(self, patient_id: str) -> date:
        return self.events_for(patient_id)[-1].timestamp


def _parse_line(line: str) -> tuple[Optional[ClinicalEvent], bool]:
    """Returns (event, converted). event is None for a malformed line."""
    try:
        obj = json.loads(line)
    except (json.JSONDecodeError, UnicodeDecodeError):
        return None, False
    if not isinstance(obj, dict):
        return None, False
    pid = obj.get("patient_id")
    if not isinstance(pid, str) or not pid:
        return None, False
    ts_raw = obj.get("timestamp")
    if not isinstance(ts_raw, str):
        return None, False
    try:
        ts = date.fromisoformat(ts_raw)
    except ValueError:
        return None, False
    if not (TIMESTAMP_MIN <= ts <= TIMESTAMP_MAX):
        return None, False
    kind = obj.get("kind")
    if kind not in KINDS:
        return None, False
    code = obj.get("code")
    if not isinstance(code, str) or not code:
        return None, False
    value = obj.get("value")
    if value is not None:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            return None, False
        value = float(value)
        if not math.isfinite(value):
            return None, False
    if kind in ("lab", "vital") and value is None:
        return None, False
    unit = obj.get("unit")
    if unit is not None and not isinstance(unit, str):
        return None, False

    converted = False
    if code == CRP_CODE and kind == "lab":
        # Missing unit is assumed to already be the canonical mg/L.
        if unit is not None:
            factor = UNIT_FACTORS.get((code, unit))
            if factor is None:
                return None, False
            if factor != 1.0:
                value = value * factor
                converted = True
        unit = "mg/L"
    return ClinicalEvent(pid, ts, kind, code, value, unit), converted


def ingest_events(lines: Iterable[str | bytes]) -> tuple[EventStore, IngestReport]:
    """Parse NDJSON lines into an EventStore, normalizing units.

    Malformed lines are dropped and counted; more than 10% malformed is a
    hard failure (guards against reading the wrong file).
    """
    report = IngestReport()
    by_patient: dict[str, list[ClinicalEvent]] = {}
    total = 0
    for raw in lines:
        if isinstance(raw, bytes):
            raw = raw.decode("utf-8", errors="replace")
        line = raw.strip()
        if not line:
            continue
        total += 1
        event, converted = _parse_line(line)
        if event is None:
            report.dropped += 1
            continue
        report.accepted += 1
        if converted:
            report.converted += 1
        by_patient.setdefault(event.patient_id, []).append(event)
    if total and report.dropped / total > MAX_MALFORMED_FRACTION:
        raise IngestError(
            f"{report.dropped}/{total} lines malformed "
            f"(>{MAX_MALFORMED_FRACTION:.0%}); refusing to ingest"
        )
    for pid in by_patient:
        # Python's sort is stable, so same-day events keep input order.
        by_patient[pid].sort(key=lambda e: e.timestamp)
    store = EventStore(by_patient, converted=report.converted)
    return store, report


@dataclass(frozen=True)
class DataPoint:
    """A (patient, time) snapshot; one exists per database entry."""

    patient_id: str
    t: date
    source_event_index: int


@dataclass(frozen=True)
class Label:
    value: str  # positive | negative | censored
    window_days: int
    first_hit: Optional[tuple[date, float]] = None


@dataclass
class CohortSummary:
    n_patients: int
    n_events: int
    per_kind: dict[str, int]
    crp_high_events: int
    crp_episodes: int
    first_date: date
    last_date: date

    def as_dict(self) -> dict:
        return {
            "n_patients": self.n_patients,
            "n_events": self.n_events,
            "per_kind": dict(self.per_kind),
            "crp_high_events": self.crp_high_events,
            "crp_episodes": self.crp_episodes,
            "first_date": self.first_date.isoformat(),
            "last_date": self.last_date.isoformat(),
        }


# Elevated CRP events further apart than this are counted as separate
# episodes in the cohort summary.
EPISODE_GAP_DAYS = 30


def summarize_cohort(events: Iterable[ClinicalEvent]) -> CohortSummary:
    """Sanity-report over an event stream (counts, endpoint events, range)."""
    per_kind = {k: 0 for k in KINDS}
    patients = set()
    n_events = 0
    first: Optional[date] = None
    last: Optional[date] = None
    high_by_patient: dict[str, list[date]] = {}
    for ev in events:
        n_events += 1
        patients.add(ev.patient_id)
        per_kind[ev.kind] = per_kind.get(ev.kind, 0) + 1
        if first is None or ev.timestamp < first:
            first = ev.timestamp
        if last is None or ev.timestamp > last:
            last = ev.timestamp
        if ev.kind == "lab" and ev.code == CRP_CODE and ev.value is not None \
                and ev.value >= CRP_THRESHOLD_MG_L:
            high_by_patient.setdefault(ev.patient_id, []).append(ev.timestamp)
    if n_events == 0:
        raise EmptyCohortError("cannot summarize an empty event stream")
    high_events = sum(len(v) for v in high_by_patient.values())
    episodes = 0
    for dates in high_by_patient.values():
        dates.sort()
        prev = None
        for d in dates:
            if prev is None or (d - prev).days > EPISODE_GAP_DAYS:
                episodes += 1
            prev = d
    assert first is not None and last is not None
    return CohortSummary(
        n_patients=len(patients),
        n_events=n_events,
        per_kind=per_kind,
        crp_high_events=high_events,
        crp_episodes=episodes,
        first_date=first,
        last_date=last,
    )


def materialize_datapoints(store: EventStore) -> list[DataPoint]:
    """One DataPoint per event, at the event's own timestamp."""
    if len(store) == 0:
        raise EmptyCohortError("event store is empty")
    out: list[DataPoint] = []
    for pid in store.patients():
        for i, ev in enumerate(store.events_for(pid)):
            out.append(DataPoint(pid, ev.timestamp, i))
    return out


def label_datapoint(
    store: EventStore,
    dp: DataPoint,
    window_days: int,
    crp_threshold: float = CRP_THRESHOLD_MG_L,
) -> Label:
    """Label by CRP lookahead: positive iff some CRP lab value >= threshold
    exists in (t, t + window_days]. With no hit, the label is negative when
    the patient's record extends to the window end, censored otherwise.
    """
    if window_days <= 0:
        raise ValueError("window_days must be positive")
    events = store.events_for(dp.patient_id)
    window_end = dp.t + timedelta(days=window_days)
    for ev in events:
        if ev.timestamp <= dp.t:
            continue
        if ev.timestamp > window_end:
            break
        if ev.kind == "lab" and ev.code == CRP_CODE and ev.value is not None \
                and ev.value >= crp_threshold:
            return Label(POSITIVE, window_days, (ev.timestamp, ev.value))
    if events[-1].timestamp < window_end:
        return Label(CENSORED, window_days)
    return Label(NEGATIVE, window_days)


@dataclass
class LabeledDataset:
    """Feature matrix + endpoint labels for the non-excluded data points.

    X holds float32 features with NaN as the missing marker; y holds 0/1
    labels. Row i corresponds to (patient_ids[i], times[i]).
    """

    schema: "object"  # features.FeatureSchema; typed loosely to avoid a cycle
    patient_ids: list[str]
    times: list[date]
    X: np.ndarray
    y: np.ndarray
    window_days: int
    censor_policy: str
    n_censored: int
    n_total_datapoints: int

    @property
    def n_rows(self) -> int:
        return len(self.patient_ids)

    @property
    def prevalence(self) -> float:
        return float(self.y.mean()) if len(self.y) else 0.0

    def rows_for_patients(self, patient_ids: set[str]) -> np.ndarray:
        mask = np.fromiter(
            (pid in patient_ids for pid in self.patient_ids),
            dtype=bool,
            count=self.n_rows,
        )
        return np.flatnonzero(mask)


def build_dataset(
    store: EventStore,
    window_days: int,
    censor_policy: str = "exclude",
    schema=None,
    crp_threshold: float = CRP_THRESHOLD_MG_L,
    datapoints: Optional[list[DataPoint]] = None,
) -> LabeledDataset:
    """Materialize, label and featurize every usable data point.

    censor_policy: 'exclude' drops censored points (their true label is
    unknowable); 'keep_as_negative' keeps them labeled 0 for sensitivity
    analysis. Pass `datapoints` to reuse a previously materialized list.
    """
    from . import features  # deferred: features depends on cohort types

    if censor_policy not in ("exclude", "keep_as_negative"):
        raise ValueError(f"unknown censor_policy {censor_policy!r}")
    if datapoints is None:
        datapoints = materialize_datapoints(store)
    if schema is None:
        schema = features.default_schema(features.code_inventory(store))
    kept: list[DataPoint] = []
    ys: list[float] = []
    n_censored = 0
    for dp in datapoints:
        label = label_datapoint(store, dp, window_days, crp_threshold)
        if label.value == CENSORED:
            n_censored += 1
            if censor_policy == "exclude":
                continue
            ys.append(0.0)
        else:
            ys.append(1.0 if label.value == POSITIVE else 0.0)
        kept.append(dp)
    if not kept:
        raise EmptyDatasetError(
            f"no usable data points at window={window_days} "
            f"(censored: {n_censored}, policy: {censor_policy})"
        )
    X = features.extract_matrix(store, kept, schema)
    return LabeledDataset(
        schema=schema,
        patient_ids=[dp.patient_id for dp in kept],
        times=[dp.t for dp in kept],
        X=X,
        y=np.asarray(ys, dtype=np.float64),
        window_days=window_days,
        censor_policy=censor_policy,
        n_censored=n_censored,
        n_total_datapoints=len(datapoints),
    )
