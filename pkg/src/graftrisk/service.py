"""HTTP service over a trained workspace.

Serving is read-only with respect to model artifacts: everything is loaded
once at startup, and a scoring answer depends only on (model, zones,
events up to as_of). The study estimate log is the single write path and
serializes through the log's lock.
"""
from __future__ import annotations

from datetime import date
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, Header, HTTPException, Query
from pydantic import BaseModel, Field

from . import study as study_mod
from .errors import (
    EstimateConflictError,
    EstimateError,
    GraftriskError,
    MissingArtifactError,
    PatientLookupError,
    StaleArtifactError,
)
from .evaluation import zone_of
from .features import extract, extract_matrix
from .cohort import DataPoint
from .payload import build_dashboard_payload, clamp01
from .study import ARMS, EstimateLog, StudyPlan
from .workspace import Workspace


class ScoreRequest(BaseModel):
    patient_id: Optional[str] = None
    as_of: Optional[str] = None
    features: Optional[list[Optional[float]]] = None


class EstimateRequest(BaseModel):
    reader_id: str
    case_id: str
    arm: str
    risk_pct: int = Field(ge=0, le=100)


def create_app(workspace_root: Path | str, reader_token: Optional[str] = None) -> FastAPI:
    ws = Workspace(workspace_root)
    app = FastAPI(title="graftrisk", version="0.1.0")

    state: dict = {"ready": False, "error": None}

    def load_state() -> None:
        try:
            state["store"] = ws.load_store()
            state["model"] = ws.load_model()
            state["zones"] = ws.load_zones()
            state["plan"] = (
                StudyPlan.from_json(ws.study_plan_path.read_text())
                if ws.study_plan_path.exists() else None
            )
            state["log"] = EstimateLog(ws.study_estimates_path)
            state["ready"] = True
            state["error"] = None
        except GraftriskError as exc:
            state["ready"] = False
            state["error"] = str(exc)

    load_state()

    def require_ready() -> None:
        if not state["ready"]:
            raise HTTPException(status_code=503,
                                detail=f"service not ready: {state['error']}")

    def require_plan() -> StudyPlan:
        require_ready()
        if state["plan"] is None:
            raise HTTPException(status_code=404, detail="no study plan in workspace")
        return state["plan"]

    def check_token(token: Optional[str]) -> None:
        if reader_token is not None and token != reader_token:
            raise HTTPException(status_code=401, detail="missing or invalid reader token")

    @app.get("/healthz")
    def healthz():
        return {"status": "ok" if state["ready"] else "degraded",
                "error": state["error"]}

    @app.get("/patients/{patient_id}/dashboard")
    def dashboard(patient_id: str, as_of: Optional[str] = None,
                  top_k: int = Query(default=10, ge=1, le=50)):
        require_ready()
        store = state["store"]
        try:
            if as_of is None:
                as_of_date = store.last_timestamp(patient_id)
            else:
                as_of_date = date.fromisoformat(as_of)
            return build_dashboard_payload(store, state["model"], state["zones"],
                                           patient_id, as_of_date, top_k=top_k)
        except PatientLookupError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))

    @app.post("/score")
    def score(req: ScoreRequest):
        require_ready()
        model = state["model"]
        zones = state["zones"]
        if req.features is not None:
            if len(req.features) != len(model.schema):
                raise HTTPException(
                    status_code=422,
                    detail=f"feature vector length {len(req.features)} != "
                           f"schema length {len(model.schema)}")
            raw = model.predict(req.features)
        elif req.patient_id is not None and req.as_of is not None:
            try:
                as_of = date.fromisoformat(req.as_of)
            except ValueError as exc:
                raise HTTPException(status_code=422, detail=str(exc))
            try:
                x = extract(state["store"], req.patient_id, as_of, model.schema)
            except PatientLookupError as exc:
                raise HTTPException(status_code=404, detail=str(exc))
            raw = model.predict(x)
        else:
            raise HTTPException(status_code=422,
                                detail="provide features, or patient_id and as_of")
        return {"score": raw, "display_score": clamp01(raw),
                "zone": zone_of(raw, zones)}

    @app.get("/study/next-case")
    def next_case(reader: str, arm: str,
                  x_reader_token: Optional[str] = Header(default=None)):
        check_token(x_reader_token)
        plan = require_plan()
        if arm not in ARMS:
            raise HTTPException(status_code=422, detail=f"unknown arm {arm!r}")
        if reader not in {r.reader_id for r in plan.readers}:
            raise HTTPException(status_code=404, detail=f"unknown reader {reader!r}")
        answered = state["log"].answered(reader, arm)
        for case in plan.cases_for(reader, arm):
            if case.case_id not in answered:
                return study_mod.case_view(
                    plan, state["store"], case.case_id, arm,
                    model=state["model"], zones=state["zones"],
                )
        return {"status": "arm_complete", "reader_id": reader, "arm": arm,
                "answered": len(answered)}

    @app.post("/study/estimates")
    def submit_estimate(req: EstimateRequest,
                        x_reader_token: Optional[str] = Header(default=None)):
        check_token(x_reader_token)
        plan = require_plan()
        try:
            return state["log"].submit(plan, req.reader_id, req.case_id,
                                       req.arm, req.risk_pct)
        except EstimateConflictError as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        except EstimateError as exc:
            raise HTTPException(status_code=422, detail=str(exc))

    @app.get("/study/report")
    def report(partial: bool = False):
        plan = require_plan()
        store = state["store"]
        model = state["model"]
        dps = [DataPoint(c.patient_id, c.t, 0) for c in plan.cases]
        X = extract_matrix(store, dps, model.schema)
        scores = model.predict_matrix(X)
        model_scores = {c.case_id: float(s) for c, s in zip(plan.cases, scores)}
        try:
            return study_mod.study_report(plan, state["log"].estimates(),
                                          model_scores, state["zones"],
                                          partial=partial)
        except EstimateError as exc:
            raise HTTPException(status_code=409, detail=str(exc))

    return app
