"""Feature extraction for (patient, t) snapshots.

Every feature is computed from events with timestamp <= t only; nothing
after t may influence the vector (verified by property tests). Missing is
a first-class marker (None in vectors, NaN in matrices), never imputed:
clinical sparsity is left for the model to use.

Missing-value semantics per aggregator:
  last_value / days_since_last  missing until the code is first observed
  count_in_window               missing if the code was never observed at
                                or before t; otherwise the count (may be 0)
  mean/min/max/slope_in_window  missing with no valued event in the window;
                                slope additionally needs >= 2 points on
                                >= 2 distinct days
  active_flag / present_flag    always present (0 or 1)
  total_record_count_90d        always present (the snapshot's own event
                                falls inside its window)
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from datetime import date
from typing import Iterable, Optional

import numpy as np

from .cohort import ClinicalEvent, DataPoint, EventStore
from .errors import SchemaError

DEFAULT_LOOKBACK_DAYS = 90
MED_ACTIVE_WINDOW_DAYS = 180

# Contracted size range for the default schema.
SCHEMA_MIN = 250
SCHEMA_MAX = 350

# Caps applied before the lab/vital budget is computed.
MAX_MED_CODES = 40
MAX_DX_CODES = 40

LABVITAL_AGGREGATORS = (
    "last_value",
    "days_since_last",
    "count_in_window",
    "mean_in_window",
    "min_in_window",
    "max_in_window",
    "slope_in_window",
)

SEX_CODE = "sex"
BIRTH_YEAR_CODE = "birth_year"
TRANSPLANT_CODE = "transplant"


@dataclass(frozen=True)
class FeatureDef:
    name: str
    kind: str  # lab | vital | medication | diagnosis | demographic | meta | padding
    code: Optional[str]
    aggregator: str
    window_days: Optional[int] = None

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "code": self.code,
            "aggregator": self.aggregator,
            "window_days": self.window_days,
        }


class FeatureSchema:
    """Ordered feature definitions; the index order is the model contract."""

    def __init__(self, defs: list[FeatureDef]):
        names = [d.name for d in defs]
        if len(set(names)) != len(names):
            raise SchemaError("feature names must be unique")
        self.defs = list(defs)
        self.names = names
        self._index = {n: i for i, n in enumerate(names)}

    def __len__(self) -> int:
        return len(self.defs)

    def index_of(self, name: str) -> int:
        return self._index[name]

    def to_json(self) -> str:
        return json.dumps(
            {"version": 1, "features": [d.as_dict() for d in self.defs]},
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, text: str) -> "FeatureSchema":
        obj = json.loads(text)
        if obj.get("version") != 1:
            raise SchemaError(f"unsupported schema version {obj.get('version')!r}")
        defs = [
            FeatureDef(
                name=d["name"],
                kind=d["kind"],
                code=d.get("code"),
                aggregator=d["aggregator"],
                window_days=d.get("window_days"),
            )
            for d in obj["features"]
        ]
        return cls(defs)

    def sha256(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def code_inventory(store: EventStore) -> dict[str, dict[str, int]]:
    """Per-kind event counts by code, taken over the whole store."""
    inv: dict[str, dict[str, int]] = {
        "lab": {},
        "vital": {},
        "medication": {},
        "diagnosis": {},
    }
    for ev in store.all_events():
        if ev.kind in inv:
            bucket = inv[ev.kind]
            bucket[ev.code] = bucket.get(ev.code, 0) + 1
    return inv


def _top_codes(counts: dict[str, int], limit: int) -> list[tuple[str, str]]:
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return [(code, "") for code, _ in ordered[:limit]]


def default_schema(inventory: dict[str, dict[str, int]]) -> FeatureSchema:
    """Deterministic construction rule for the ~300-feature default schema.

    Top-K lab/vital codes (by event count, ties lexicographic) each get the
    seven longitudinal aggregators; medications get active flags, diagnoses
    presence flags; plus demographics, days-since-transplant and the total
    record count. K is chosen so the total lands in [250, 350]; small
    inventories are padded with reserved always-missing slots up to 250.
    """
    labvital = {}
    for kind in ("lab", "vital"):
        for code, cnt in inventory.get(kind, {}).items():
            labvital[code] = labvital.get(code, 0) + cnt
    med_counts = inventory.get("medication", {})
    dx_counts = inventory.get("diagnosis", {})
    if not labvital and not med_counts and not dx_counts:
        raise SchemaError("empty code inventory")

    kind_by_code = {}
    for code in labvital:
        kind_by_code[code] = "lab" if code in inventory.get("lab", {}) else "vital"

    meds = sorted(med_counts.items(), key=lambda kv: (-kv[1], kv[0]))[:MAX_MED_CODES]
    dxs = sorted(dx_counts.items(), key=lambda kv: (-kv[1], kv[0]))[:MAX_DX_CODES]
    base = len(meds) + len(dxs) + 4
    budget = (SCHEMA_MAX - base) // len(LABVITAL_AGGREGATORS)
    lv_sorted = sorted(labvital.items(), key=lambda kv: (-kv[1], kv[0]))
    lv_codes = [code for code, _ in lv_sorted[: max(budget, 0)]]

    w = DEFAULT_LOOKBACK_DAYS
    defs: list[FeatureDef] = []
    for code in lv_codes:
        kind = kind_by_code[code]
        defs.append(FeatureDef(f"{code}_last", kind, code, "last_value"))
        defs.append(FeatureDef(f"{code}_days_since", kind, code, "days_since_last"))
        defs.append(FeatureDef(f"{code}_count_{w}d", kind, code, "count_in_window", w))
        defs.append(FeatureDef(f"{code}_mean_{w}d", kind, code, "mean_in_window", w))
        defs.append(FeatureDef(f"{code}_min_{w}d", kind, code, "min_in_window", w))
        defs.append(FeatureDef(f"{code}_max_{w}d", kind, code, "max_in_window", w))
        defs.append(FeatureDef(f"{code}_slope_{w}d", kind, code, "slope_in_window", w))
    for code, _ in meds:
        defs.append(
            FeatureDef(
                f"med_{code}_active_{MED_ACTIVE_WINDOW_DAYS}d",
                "medication",
                code,
                "active_flag",
                MED_ACTIVE_WINDOW_DAYS,
            )
        )
    for code, _ in dxs:
        defs.append(FeatureDef(f"dx_{code}_present", "diagnosis", code, "present_flag"))
    defs.append(FeatureDef("age_years", "demographic", BIRTH_YEAR_CODE, "age_years"))
    defs.append(FeatureDef("sex", "demographic", SEX_CODE, "sex"))
    defs.append(
        FeatureDef("days_since_transplant", "demographic", TRANSPLANT_CODE, "days_since_transplant")
    )
    defs.append(FeatureDef(f"total_record_count_{w}d", "meta", None, "total_record_count", w))

    pad_i = 0
    while len(defs) < SCHEMA_MIN:
        defs.append(FeatureDef(f"pad_{pad_i:03d}", "padding", None, "always_missing"))
        pad_i += 1
    if len(defs) > SCHEMA_MAX:
        raise SchemaError(f"schema size {len(defs)} exceeds {SCHEMA_MAX}")
    return FeatureSchema(defs)


def _ols_slope(days: list[int], values: list[float]) -> Optional[float]:
    if len(days) < 2:
        return None
    n = len(days)
    mx = sum(days) / n
    my = sum(values) / n
    sxx = sum((d - mx) ** 2 for d in days)
    if sxx == 0.0:
        return None
    sxy = sum((d - mx) * (v - my) for d, v in zip(days, values))
    return sxy / sxx


def extract(
    store: EventStore, patient_id: str, t: date, schema: FeatureSchema
) -> list[Optional[float]]:
    """Feature vector for one snapshot. Scans the patient's history directly;
    the vectorized bulk path in extract_matrix must agree with this exactly.
    """
    events = store.events_for(patient_id)
    history = [ev for ev in events if ev.timestamp <= t]
    vec: list[Optional[float]] = []
    for fd in schema.defs:
        vec.append(_extract_one(history, t, fd))
    return vec


def _extract_one(history: list[ClinicalEvent], t: date, fd: FeatureDef) -> Optional[float]:
    agg = fd.aggregator
    if agg == "always_missing":
        return None
    if agg == "total_record_count":
        w = fd.window_days or DEFAULT_LOOKBACK_DAYS
        return float(sum(1 for ev in history if (t - ev.timestamp).days < w))
    if agg == "age_years":
        years = [ev.value for ev in history
                 if ev.kind == "demographic" and ev.code == BIRTH_YEAR_CODE and ev.value is not None]
        return float(t.year - years[-1]) if years else None
    if agg == "sex":
        vals = [ev.value for ev in history
                if ev.kind == "demographic" and ev.code == SEX_CODE and ev.value is not None]
        return float(vals[-1]) if vals else None
    if agg == "days_since_transplant":
        ts = [ev.timestamp for ev in history
              if ev.kind == "demographic" and ev.code == TRANSPLANT_CODE]
        return float((t - ts[0]).days) if ts else None
    if agg == "present_flag":
        return 1.0 if any(ev.kind == fd.kind and ev.code == fd.code for ev in history) else 0.0
    if agg == "active_flag":
        w = fd.window_days or MED_ACTIVE_WINDOW_DAYS
        hit = any(
            ev.kind == fd.kind and ev.code == fd.code and (t - ev.timestamp).days < w
            for ev in history
        )
        return 1.0 if hit else 0.0

    coded = [ev for ev in history
             if ev.kind in ("lab", "vital") and ev.code == fd.code and ev.value is not None]
    if agg == "last_value":
        return coded[-1].value if coded else None
    if agg == "days_since_last":
        return float((t - coded[-1].timestamp).days) if coded else None

    w = fd.window_days or DEFAULT_LOOKBACK_DAYS
    in_window = [ev for ev in coded if (t - ev.timestamp).days < w]
    if agg == "count_in_window":
        return float(len(in_window)) if coded else None
    if not in_window:
        return None
    values = [ev.value for ev in in_window]
    if agg == "mean_in_window":
        return sum(values) / len(values)
    if agg == "min_in_window":
        return min(values)
    if agg == "max_in_window":
        return max(values)
    if agg == "slope_in_window":
        days = [ev.timestamp.toordinal() for ev in in_window]
        return _ols_slope(days, values)
    raise SchemaError(f"unknown aggregator {agg!r}")


class _PatientIndex:
    """Per-(kind, code) sorted time/value arrays for one patient.

    `times` indexes every event of a key; `vtimes`/`values` index only the
    valued ones (for lab/vital keys the two coincide by construction).
    """

    def __init__(self, events: list[ClinicalEvent]):
        times: dict[tuple[str, str], list[int]] = {}
        vtimes: dict[tuple[str, str], list[int]] = {}
        values: dict[tuple[str, str], list[float]] = {}
        all_times: list[int] = []
        for ev in events:
            o = ev.timestamp.toordinal()
            all_times.append(o)
            key = (ev.kind, ev.code)
            if ev.kind in ("lab", "vital"):
                if ev.value is None:
                    continue
                times.setdefault(key, []).append(o)
                vtimes.setdefault(key, []).append(o)
                values.setdefault(key, []).append(ev.value)
            else:
                times.setdefault(key, []).append(o)
                if ev.value is not None:
                    vtimes.setdefault(key, []).append(o)
                    values.setdefault(key, []).append(ev.value)
        self.times = {k: np.asarray(v, dtype=np.int64) for k, v in times.items()}
        self.vtimes = {k: np.asarray(v, dtype=np.int64) for k, v in vtimes.items()}
        self.values = {k: np.asarray(v, dtype=np.float64) for k, v in values.items()}
        self.all_times = np.asarray(all_times, dtype=np.int64)


def extract_matrix(
    store: EventStore, datapoints: list[DataPoint], schema: FeatureSchema
) -> np.ndarray:
    """Vectorized extraction of many snapshots into a float32 matrix
    (NaN = missing). Rows align with `datapoints`.
    """
    n, F = len(datapoints), len(schema)
    out = np.full((n, F), np.nan, dtype=np.float32)
    by_patient: dict[str, list[int]] = {}
    for i, dp in enumerate(datapoints):
        by_patient.setdefault(dp.patient_id, []).append(i)
    for pid, rows in by_patient.items():
        idx = _PatientIndex(store.events_for(pid))
        T = np.asarray([datapoints[i].t.toordinal() for i in rows], dtype=np.int64)
        years = np.asarray([datapoints[i].t.year for i in rows], dtype=np.float64)
        rows_arr = np.asarray(rows, dtype=np.intp)
        for j, fd in enumerate(schema.defs):
            col = _extract_column(idx, T, years, fd)
            if col is not None:
                out[rows_arr, j] = col
    return out


def _extract_column(
    idx: _PatientIndex, T: np.ndarray, years: np.ndarray, fd: FeatureDef
) -> Optional[np.ndarray]:
    agg = fd.aggregator
    n = len(T)
    if agg == "always_missing":
        return None
    if agg == "total_record_count":
        w = fd.window_days or DEFAULT_LOOKBACK_DAYS
        A = idx.all_times
        return (np.searchsorted(A, T, "right") - np.searchsorted(A, T - w, "right")).astype(
            np.float64
        )
    if agg == "age_years":
        key = ("demographic", BIRTH_YEAR_CODE)
        if key not in idx.vtimes:
            return None
        S, V = idx.vtimes[key], idx.values[key]
        last = np.searchsorted(S, T, "right") - 1
        col = np.full(n, np.nan)
        ok = last >= 0
        col[ok] = years[ok] - V[last[ok]]
        return col
    if agg == "sex":
        key = ("demographic", SEX_CODE)
        if key not in idx.vtimes:
            return None
        S, V = idx.vtimes[key], idx.values[key]
        last = np.searchsorted(S, T, "right") - 1
        col = np.full(n, np.nan)
        ok = last >= 0
        col[ok] = V[last[ok]]
        return col
    if agg == "days_since_transplant":
        key = ("demographic", TRANSPLANT_CODE)
        if key not in idx.times:
            return None
        first = idx.times[key][0]
        col = np.full(n, np.nan)
        ok = T >= first
        col[ok] = (T[ok] - first).astype(np.float64)
        return col
    if agg == "present_flag":
        key = (fd.kind, fd.code)
        if key not in idx.times:
            return np.zeros(n)
        S = idx.times[key]
        return (np.searchsorted(S, T, "right") > 0).astype(np.float64)
    if agg == "active_flag":
        key = (fd.kind, fd.code)
        if key not in idx.times:
            return np.zeros(n)
        w = fd.window_days or MED_ACTIVE_WINDOW_DAYS
        S = idx.times[key]
        cnt = np.searchsorted(S, T, "right") - np.searchsorted(S, T - w, "right")
        return (cnt > 0).astype(np.float64)

    key = (fd.kind, fd.code)
    if key not in idx.vtimes:
        return None
    S, V = idx.vtimes[key], idx.values[key]
    hi = np.searchsorted(S, T, "right")
    if agg == "last_value":
        col = np.full(n, np.nan)
        ok = hi > 0
        col[ok] = V[hi[ok] - 1]
        return col
    if agg == "days_since_last":
        col = np.full(n, np.nan)
        ok = hi > 0
        col[ok] = (T[ok] - S[hi[ok] - 1]).astype(np.float64)
        return col

    w = fd.window_days or DEFAULT_LOOKBACK_DAYS
    lo = np.searchsorted(S, T - w, "right")
    cnt = hi - lo
    if agg == "count_in_window":
        col = np.full(n, np.nan)
        ok = hi > 0
        col[ok] = cnt[ok].astype(np.float64)
        return col
    col = np.full(n, np.nan)
    # The loops below mirror the scalar path's evaluation order exactly so
    # single-snapshot and bulk extraction agree bit for bit.
    if agg == "mean_in_window":
        for i in np.flatnonzero(cnt > 0):
            vals = V[lo[i]:hi[i]].tolist()
            col[i] = sum(vals) / len(vals)
        return col
    if agg == "min_in_window":
        for i in np.flatnonzero(cnt > 0):
            col[i] = V[lo[i]:hi[i]].min()
        return col
    if agg == "max_in_window":
        for i in np.flatnonzero(cnt > 0):
            col[i] = V[lo[i]:hi[i]].max()
        return col
    if agg == "slope_in_window":
        for i in np.flatnonzero(cnt > 1):
            s = _ols_slope(S[lo[i]:hi[i]].tolist(), V[lo[i]:hi[i]].tolist())
            if s is not None:
                col[i] = s
        return col
    raise SchemaError(f"unknown aggregator {agg!r}")


def vector_from_row(row: np.ndarray) -> list[Optional[float]]:
    """Matrix row back to the None-marked vector form."""
    return [None if np.isnan(v) else float(v) for v in row]


def matrix_from_vectors(vectors: Iterable[list[Optional[float]]]) -> np.ndarray:
    rows = [[np.nan if v is None else v for v in vec] for vec in vectors]
    return np.asarray(rows, dtype=np.float32)
