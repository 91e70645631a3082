"""File-based workspace: every derived artifact records the SHA-256 of the
inputs it was built from, and loading a stale artifact fails with a
remediation hint. No database server; a directory is the deployment unit.

Layout under the root:
    events.ndjson            raw clinical events (the canonical input)
    datapoints.ndjson        one (patient, date, index) line per event
    datapoints.meta.json
    schema.json              feature schema (also embedded in the model)
    model.json               trained ensemble + split + fingerprints
    zones.json               traffic-light thresholds
    study/plan.json          reader-study design
    study/estimates.ndjsonl  append-only estimate log
    reports/                 validation + study reports
"""
from __future__ import annotations

import hashlib
import json
from datetime import date
from pathlib import Path

from .cohort import DataPoint, EventStore, ingest_events
from .errors import MissingArtifactError, StaleArtifactError
from .evaluation import Zones
from . import gbrt


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Workspace:
    def __init__(self, root: Path | str):
        self.root = Path(root)

    @property
    def events_path(self) -> Path:
        return self.root / "events.ndjson"

    @property
    def datapoints_path(self) -> Path:
        return self.root / "datapoints.ndjson"

    @property
    def datapoints_meta_path(self) -> Path:
        return self.root / "datapoints.meta.json"

    @property
    def schema_path(self) -> Path:
        return self.root / "schema.json"

    @property
    def model_path(self) -> Path:
        return self.root / "model.json"

    @property
    def zones_path(self) -> Path:
        return self.root / "zones.json"

    @property
    def study_dir(self) -> Path:
        return self.root / "study"

    @property
    def study_plan_path(self) -> Path:
        return self.study_dir / "plan.json"

    @property
    def study_estimates_path(self) -> Path:
        return self.study_dir / "estimates.ndjsonl"

    @property
    def reports_dir(self) -> Path:
        return self.root / "reports"

    def ensure_root(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)

    def require(self, path: Path, produced_by: str) -> Path:
        if not path.exists():
            raise MissingArtifactError(
                f"{path.name} not found in workspace; run `graftrisk {produced_by}` first"
            )
        return path

    def check_fingerprints(self, artifact: str, recorded: dict) -> None:
        for name, digest in recorded.items():
            path = self.root / name
            if not path.exists():
                raise StaleArtifactError(
                    f"{artifact} was built from {name}, which no longer exists; "
                    f"regenerate the workspace inputs"
                )
            current = file_sha256(path)
            if current != digest:
                raise StaleArtifactError(
                    f"{artifact} is stale: {name} changed since it was built "
                    f"(expected {digest[:12]}, found {current[:12]}); re-run the "
                    f"producing command"
                )

    # -- loading helpers ---------------------------------------------------

    def load_store(self) -> EventStore:
        self.require(self.events_path, "synth (or ingest)")
        with open(self.events_path) as fh:
            store, _ = ingest_events(fh)
        return store

    def load_datapoints(self) -> list[DataPoint]:
        self.require(self.datapoints_path, "materialize")
        meta = json.loads(self.read(self.datapoints_meta_path, "materialize"))
        self.check_fingerprints("datapoints.ndjson", meta["inputs"])
        out = []
        with open(self.datapoints_path) as fh:
            for line in fh:
                if line.strip():
                    obj = json.loads(line)
                    out.append(DataPoint(obj["patient_id"],
                                         date.fromisoformat(obj["t"]),
                                         obj["source_event_index"]))
        return out

    def read(self, path: Path, produced_by: str) -> str:
        return self.require(path, produced_by).read_text()

    def load_model(self) -> gbrt.Model:
        raw = self.require(self.model_path, "train").read_bytes()
        model = gbrt.load(raw)
        self.check_fingerprints("model.json", model.meta.get("input_fingerprints", {}))
        return model

    def load_zones(self) -> Zones:
        obj = json.loads(self.read(self.zones_path, "calibrate"))
        self.check_fingerprints("zones.json", obj.get("input_fingerprints", {}))
        return Zones.from_dict(obj["zones"])

    # -- writing helpers ----------------------------------------------------

    def write_datapoints(self, datapoints: list[DataPoint]) -> dict:
        self.ensure_root()
        with open(self.datapoints_path, "w") as fh:
            for dp in datapoints:
                fh.write(json.dumps({
                    "patient_id": dp.patient_id,
                    "t": dp.t.isoformat(),
                    "source_event_index": dp.source_event_index,
                }) + "\n")
        meta = {
            "n_datapoints": len(datapoints),
            "inputs": {"events.ndjson": file_sha256(self.events_path)},
        }
        self.datapoints_meta_path.write_text(json.dumps(meta, indent=2))
        return meta

    def write_model(self, model: gbrt.Model) -> None:
        self.ensure_root()
        self.model_path.write_bytes(model.save())
        self.schema_path.write_text(model.schema.to_json())

    def write_zones(self, zones: Zones) -> None:
        self.ensure_root()
        obj = {
            "zones": zones.as_dict(),
            "input_fingerprints": {
                "model.json": file_sha256(self.model_path),
                "events.ndjson": file_sha256(self.events_path),
            },
        }
        self.zones_path.write_text(json.dumps(obj, sort_keys=True, indent=2))
