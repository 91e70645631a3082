"""Dashboard payload assembly: the JSON consumed by the web UI and by the
reader-study console in the AI arm.

Everything in a payload derives from events at or before `as_of`; labels
and later events never appear (the study formats are blinded at this
layer, not in the UI).
"""
from __future__ import annotations

from datetime import date

from .cohort import DataPoint, EventStore
from .errors import PatientLookupError
from .evaluation import Zones, zone_of
from .explain import global_importance, local_attribution
from .features import extract, extract_matrix
from .gbrt import Model


def clamp01(x: float) -> float:
    return min(1.0, max(0.0, x))


def build_dashboard_payload(store: EventStore, model: Model, zones: Zones,
                            patient_id: str, as_of: date, top_k: int = 10) -> dict:
    """Risk score, traffic-light zone, score trajectory over the patient's
    history, and local/global feature panels."""
    events = store.events_for(patient_id)
    dates = sorted({ev.timestamp for ev in events if ev.timestamp <= as_of})
    if not dates:
        raise PatientLookupError(
            f"patient {patient_id!r} has no events at or before {as_of.isoformat()}"
        )
    datapoints = [DataPoint(patient_id, d, i) for i, d in enumerate(dates)]
    X = extract_matrix(store, datapoints, model.schema)
    scores = model.predict_matrix(X)
    trajectory = [
        {
            "date": d.isoformat(),
            "score": float(s),
            "display_score": clamp01(float(s)),
            "zone": zone_of(float(s), zones),
        }
        for d, s in zip(dates, scores)
    ]
    x = extract(store, patient_id, as_of, model.schema)
    attribution = local_attribution(model, x)
    score = attribution.prediction
    local = []
    for feature, contribution in attribution.top(top_k):
        idx = model.schema.index_of(feature)
        local.append({
            "feature": feature,
            "value_at_t": x[idx],
            "contribution": contribution,
        })
    global_top = global_importance(model).as_payload(top_k)
    return {
        "patient_id": patient_id,
        "as_of": as_of.isoformat(),
        "score": {"raw": score, "display": clamp01(score)},
        "zone": zone_of(score, zones),
        "thresholds": zones.as_dict(),
        "trajectory": trajectory,
        "local": local,
        "global": global_top,
    }
