import json
from datetime import date

import numpy as np
import pytest

from graftrisk.cohort import ClinicalEvent, EventStore, LabeledDataset, ingest_events
from graftrisk.features import FeatureDef, FeatureSchema
from graftrisk.synthgen import SynthConfig, generate_cohort, events_to_ndjson


def make_dataset(X, y, window_days=90):
    """LabeledDataset over plain arrays; each row is its own patient."""
    X = np.asarray(X, dtype=np.float32)
    schema = FeatureSchema([
        FeatureDef(f"f{i:03d}", "lab", f"f{i}", "last_value")
        for i in range(X.shape[1])
    ])
    n = len(X)
    return LabeledDataset(
        schema=schema,
        patient_ids=[f"p{i:05d}" for i in range(n)],
        times=[date(2015, 1, 1)] * n,
        X=X,
        y=np.asarray(y, dtype=np.float64),
        window_days=window_days,
        censor_policy="exclude",
        n_censored=0,
        n_total_datapoints=n,
    )


def store_from_events(rows):
    """rows: (patient_id, iso_date, kind, code, value[, unit]) tuples."""
    lines = []
    for row in rows:
        obj = {"patient_id": row[0], "timestamp": row[1], "kind": row[2], "code": row[3]}
        if len(row) > 4 and row[4] is not None:
            obj["value"] = row[4]
        if len(row) > 5 and row[5] is not None:
            obj["unit"] = row[5]
        lines.append(json.dumps(obj))
    store, report = ingest_events(lines)
    return store, report


@pytest.fixture(scope="session")
def small_cohort_store():
    cfg = SynthConfig(n_patients=60, seed=7)
    events = generate_cohort(cfg)
    store, _ = ingest_events(events_to_ndjson(events).splitlines())
    return store


@pytest.fixture(scope="session")
def small_cohort_events():
    return generate_cohort(SynthConfig(n_patients=60, seed=7))
