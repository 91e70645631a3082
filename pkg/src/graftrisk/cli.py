"""Command-line driver. Every subcommand reads and writes only workspace
paths; artifacts carry input fingerprints so stale state fails loudly.

Exit codes: 0 success, 1 domain error, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from datetime import date
from pathlib import Path

import numpy as np

from . import gbrt, study as study_mod
from .cohort import build_dataset, ingest_events, materialize_datapoints, summarize_cohort
from .errors import GraftriskError, MissingArtifactError
from .evaluation import (
    calibrate_zones,
    repeated_validation,
    split_patients,
    subset_dataset,
    zone_of,
)
from .features import code_inventory, default_schema, extract
from .payload import build_dashboard_payload
from .synthgen import SynthConfig, generate_cohort, events_to_ndjson
from .workspace import Workspace, file_sha256


def _workspace(args) -> Workspace:
    root = args.workspace or os.environ.get("GRAFTRISK_WORKSPACE") or "."
    return Workspace(root)


def _emit(args, payload: dict, text: str = "") -> None:
    if getattr(args, "json", False):
        print(json.dumps(payload, sort_keys=True, default=str))
    else:
        print(text if text else json.dumps(payload, sort_keys=True, default=str))


def cmd_synth(args) -> int:
    ws = _workspace(args)
    ws.ensure_root()
    cfg = SynthConfig(
        n_patients=args.patients,
        start_year=args.start_year,
        end_year=args.end_year,
        target_prevalence=args.prevalence,
        visits_per_year=args.visits_per_year,
        seed=args.seed,
        ablate_signal=args.ablate_signal,
    )
    events = generate_cohort(cfg)
    ws.events_path.write_text(events_to_ndjson(events))
    summary = summarize_cohort(events)
    payload = {"written": str(ws.events_path), **summary.as_dict()}
    _emit(args, payload,
          f"wrote {summary.n_events} events for {summary.n_patients} patients "
          f"to {ws.events_path}")
    return 0


def cmd_ingest(args) -> int:
    ws = _workspace(args)
    ws.ensure_root()
    src = Path(args.input)
    if not src.exists():
        raise MissingArtifactError(f"input file {src} does not exist")
    with open(src) as fh:
        store, report = ingest_events(fh)
    ws.events_path.write_text(src.read_text())
    payload = {"written": str(ws.events_path), **report.as_dict(),
               "n_patients": len(store.patients())}
    _emit(args, payload,
          f"ingested {report.accepted} events ({report.dropped} dropped, "
          f"{report.converted} unit-converted) from {src}")
    return 0


def cmd_materialize(args) -> int:
    ws = _workspace(args)
    store = ws.load_store()
    datapoints = materialize_datapoints(store)
    meta = ws.write_datapoints(datapoints)
    payload = {"n_datapoints": meta["n_datapoints"], "written": str(ws.datapoints_path)}
    _emit(args, payload, f"materialized {meta['n_datapoints']} data points")
    return 0


def _hp_from_args(args) -> gbrt.Hyperparams:
    return gbrt.Hyperparams(
        n_trees=args.trees,
        learning_rate=args.learning_rate,
        max_depth=args.max_depth,
        min_samples_leaf=args.min_samples_leaf,
        row_subsample=args.row_subsample,
        feature_subsample=args.feature_subsample,
        seed=args.seed,
    )


def cmd_train(args) -> int:
    ws = _workspace(args)
    store = ws.load_store()
    datapoints = ws.load_datapoints()
    dataset = build_dataset(store, args.window, args.censor_policy, datapoints=datapoints)
    split = split_patients(sorted(set(dataset.patient_ids)),
                           (0.70, 0.15, 0.15), args.split_seed)
    train_rows = dataset.rows_for_patients(set(split.train))
    model = gbrt.fit(subset_dataset(dataset, train_rows), _hp_from_args(args),
                     n_jobs=args.n_jobs)
    model.meta["split"] = {
        "seed": split.seed,
        "ratios": list(split.ratios),
        "train": sorted(split.train),
        "dev": sorted(split.dev),
        "test": sorted(split.test),
    }
    model.meta["censor_policy"] = args.censor_policy
    model.meta["input_fingerprints"] = {
        "events.ndjson": file_sha256(ws.events_path),
        "datapoints.ndjson": file_sha256(ws.datapoints_path),
    }
    ws.write_model(model)
    payload = {
        "written": str(ws.model_path),
        "window_days": args.window,
        "n_train_rows": int(len(train_rows)),
        "n_trees": len(model.trees),
        "base_score": model.base_score,
        "final_sse": model.meta["sse_per_round"][-1] if model.meta["sse_per_round"] else None,
    }
    _emit(args, payload,
          f"trained {len(model.trees)} trees on {len(train_rows)} rows "
          f"(window {args.window}d) -> {ws.model_path}")
    return 0


def cmd_calibrate(args) -> int:
    ws = _workspace(args)
    store = ws.load_store()
    model = ws.load_model()
    datapoints = ws.load_datapoints()
    window = int(model.meta["window_days"])
    policy = model.meta.get("censor_policy", "exclude")
    dataset = build_dataset(store, window, policy, schema=model.schema,
                            datapoints=datapoints)
    dev_ids = set(model.meta["split"]["dev"])
    dev_rows = dataset.rows_for_patients(dev_ids)
    scores = model.predict_matrix(dataset.X[dev_rows])
    zones = calibrate_zones(scores, dataset.y[dev_rows])
    ws.write_zones(zones)
    payload = {"written": str(ws.zones_path), **zones.as_dict(),
               "n_dev_rows": int(len(dev_rows))}
    _emit(args, payload,
          f"zones: green < {zones.t_f2:.4f} <= yellow < {zones.t_f05:.4f} <= red "
          f"(F1 marker {zones.t_f1:.4f})")
    return 0


def cmd_validate(args) -> int:
    ws = _workspace(args)
    store = ws.load_store()
    schema = default_schema(code_inventory(store))

    def builder(window: int):
        return build_dataset(store, window, args.censor_policy, schema=schema)

    report = repeated_validation(
        builder,
        _hp_from_args(args),
        n_repeats=args.repeats,
        windows=tuple(args.windows),
        seed=args.split_seed,
        n_jobs=args.n_jobs,
        mode="kfold" if args.kfold else "monte_carlo",
    )
    ws.reports_dir.mkdir(parents=True, exist_ok=True)
    (ws.reports_dir / "validation.json").write_text(report.to_json())
    text = report.to_text()
    (ws.reports_dir / "validation.txt").write_text(text)
    _emit(args, report.as_dict(), text)
    return 0


def cmd_score(args) -> int:
    ws = _workspace(args)
    store = ws.load_store()
    model = ws.load_model()
    zones = ws.load_zones()
    as_of = date.fromisoformat(args.date)
    if args.dashboard:
        payload = build_dashboard_payload(store, model, zones, args.patient, as_of,
                                          top_k=args.top_k)
        _emit(args, payload,
              f"{args.patient} @ {args.date}: score {payload['score']['raw']:.4f} "
              f"zone {payload['zone']}")
        return 0
    x = extract(store, args.patient, as_of, model.schema)
    score = model.predict(x)
    payload = {
        "patient_id": args.patient,
        "as_of": args.date,
        "score": score,
        "display_score": min(1.0, max(0.0, score)),
        "zone": zone_of(score, zones),
    }
    _emit(args, payload,
          f"{args.patient} @ {args.date}: score {score:.4f} zone {payload['zone']}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(_workspace(args).root, reader_token=args.token)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def cmd_study_init(args) -> int:
    ws = _workspace(args)
    store = ws.load_store()
    model = ws.load_model()
    window = int(model.meta["window_days"])
    test_ids = set(model.meta["split"]["test"])
    datapoints = ws.load_datapoints()
    from .cohort import CENSORED, label_datapoint

    pool = []
    seen = set()
    for dp in datapoints:
        if dp.patient_id not in test_ids:
            continue
        key = (dp.patient_id, dp.t)
        if key in seen:
            continue
        seen.add(key)
        label = label_datapoint(store, dp, window)
        if label.value == CENSORED:
            continue
        pool.append(study_mod.StudyCase(
            case_id=f"{dp.patient_id}@{dp.t.isoformat()}",
            patient_id=dp.patient_id,
            t=dp.t,
            label=1 if label.value == "positive" else 0,
        ))
    plan = study_mod.design_study(
        pool,
        class_counts=(args.positives, args.negatives),
        per_reader=args.per_reader,
        window_days=window,
        seed=args.seed,
    )
    ws.study_dir.mkdir(parents=True, exist_ok=True)
    ws.study_plan_path.write_text(plan.to_json())
    payload = {"written": str(ws.study_plan_path), "n_cases": len(plan.cases),
               "class_counts": list(plan.class_counts), "pool_size": len(pool)}
    _emit(args, payload,
          f"study plan: {len(plan.cases)} cases "
          f"({plan.class_counts[0]}/{plan.class_counts[1]}) from a pool of {len(pool)}")
    return 0


def cmd_study_simulate(args) -> int:
    ws = _workspace(args)
    plan = study_mod.StudyPlan.from_json(ws.read(ws.study_plan_path, "study init"))
    log = study_mod.EstimateLog(ws.study_estimates_path)
    n = study_mod.simulate_readers(plan, log, skill=args.skill, seed=args.seed)
    payload = {"submitted": n, "total": len(log), "written": str(ws.study_estimates_path)}
    _emit(args, payload, f"simulated {n} estimates (log now {len(log)})")
    return 0


def cmd_study_report(args) -> int:
    ws = _workspace(args)
    store = ws.load_store()
    model = ws.load_model()
    zones = ws.load_zones()
    plan = study_mod.StudyPlan.from_json(ws.read(ws.study_plan_path, "study init"))
    log = study_mod.EstimateLog(ws.study_estimates_path) \
        if ws.study_estimates_path.exists() else study_mod.EstimateLog(ws.study_estimates_path)
    from .cohort import DataPoint
    from .features import extract_matrix

    dps = [DataPoint(c.patient_id, c.t, 0) for c in plan.cases]
    X = extract_matrix(store, dps, model.schema)
    scores = model.predict_matrix(X)
    model_scores = {c.case_id: float(s) for c, s in zip(plan.cases, scores)}
    report = study_mod.study_report(plan, log.estimates(), model_scores, zones,
                                    partial=args.partial)
    t2, t3 = study_mod.report_tables(report)
    ws.reports_dir.mkdir(parents=True, exist_ok=True)
    (ws.reports_dir / "study.json").write_text(json.dumps(report, sort_keys=True, indent=2))
    (ws.reports_dir / "study_table2.txt").write_text(t2)
    (ws.reports_dir / "study_table3.txt").write_text(t3)
    _emit(args, report, t2 + "\n" + t3)
    return 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--workspace", default=None,
                   help="workspace root (default: $GRAFTRISK_WORKSPACE or cwd)")
    p.add_argument("--json", action="store_true", help="machine-readable output")


def _add_hp(p: argparse.ArgumentParser) -> None:
    p.add_argument("--trees", type=int, default=300)
    p.add_argument("--learning-rate", type=float, default=0.05)
    p.add_argument("--max-depth", type=int, default=4)
    p.add_argument("--min-samples-leaf", type=int, default=20)
    p.add_argument("--row-subsample", type=float, default=1.0)
    p.add_argument("--feature-subsample", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-jobs", type=int, default=2)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graftrisk",
        description="Infection-risk decision support: synthetic cohort, boosted-tree "
                    "risk model, traffic-light calibration, validation and reader study.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic cohort")
    _add_common(p)
    p.add_argument("--patients", type=int, default=1500)
    p.add_argument("--start-year", type=int, default=2009)
    p.add_argument("--end-year", type=int, default=2019)
    p.add_argument("--prevalence", type=float, default=0.12)
    p.add_argument("--visits-per-year", type=float, default=3.5)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--ablate-signal", action="store_true",
                   help="null cohort: no learnable pre-infection signal")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="ingest an external NDJSON event file")
    _add_common(p)
    p.add_argument("--input", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("materialize", help="create one data point per event")
    _add_common(p)
    p.set_defaults(func=cmd_materialize)

    p = sub.add_parser("train", help="train the risk model on the train fold")
    _add_common(p)
    _add_hp(p)
    p.add_argument("--window", type=int, default=90)
    p.add_argument("--censor-policy", choices=("exclude", "keep_as_negative"),
                   default="exclude")
    p.add_argument("--split-seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", help="calibrate traffic-light zones on the dev fold")
    _add_common(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("validate", help="repeated patient-level validation")
    _add_common(p)
    _add_hp(p)
    p.add_argument("--windows", type=int, nargs="+", default=[90, 180, 360])
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--censor-policy", choices=("exclude", "keep_as_negative"),
                   default="exclude")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--kfold", action="store_true",
                   help="classic disjoint-fold mode instead of repeated random splits")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("score", help="score one patient at a date")
    _add_common(p)
    p.add_argument("--patient", required=True)
    p.add_argument("--date", required=True, help="YYYY-MM-DD")
    p.add_argument("--dashboard", action="store_true",
                   help="emit the full dashboard payload")
    p.add_argument("--top-k", type=int, default=10)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("serve", help="run the HTTP service")
    _add_common(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--token", default=None, help="static reader token for study endpoints")
    p.set_defaults(func=cmd_serve)

    ps = sub.add_parser("study", help="reader-study workflow")
    study_sub = ps.add_subparsers(dest="study_command", required=True)

    p = study_sub.add_parser("init", help="design the study from test-fold cases")
    _add_common(p)
    p.add_argument("--positives", type=int, default=38)
    p.add_argument("--negatives", type=int, default=82)
    p.add_argument("--per-reader", type=int, default=15)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_study_init)

    p = study_sub.add_parser("simulate-readers", help="fill the log with simulated readers")
    _add_common(p)
    p.add_argument("--skill", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_study_simulate)

    p = study_sub.add_parser("report", help="compute the study report")
    _add_common(p)
    p.add_argument("--partial", action="store_true",
                   help="allow a report with missing estimates")
    p.set_defaults(func=cmd_study_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except GraftriskError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
