"""Reader-study harness: case sampling, arm/reader assignment, estimate
collection and the study report.

The study compares physicians alone (arm MD) against physicians with the
dashboard (arm MD_AI) on a fixed case set: 120 snapshots from 120 distinct
patients (38 with an infection in the lookahead window, 82 without), none
of whose patients appear in the model's train or dev folds. Every case is
judged exactly once per arm; a reader never sees the same case in both
arms (the assignment rotates case blocks across readers between arms).

Estimates persist in an append-only NDJSON log; reports are always
recomputed from the raw log.
"""
from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass
from datetime import date
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .cohort import EventStore
from .errors import (
    EstimateConflictError,
    EstimateError,
    StudyDesignError,
)
from .evaluation import Zones, confusion_metrics, pr_auc, roc_auc
from .gbrt import Model
from .payload import build_dashboard_payload

ARMS = ("MD", "MD_AI")
SENIORITIES = ("junior", "senior")

# ">50%" binarization, read literally: an estimate of exactly 50 is
# negative. Estimates are integers, so >= 50.5 is equivalent.
HUMAN_CUTOFF = 50.5


@dataclass(frozen=True)
class Reader:
    reader_id: str
    seniority: str  # junior | senior


@dataclass(frozen=True)
class StudyCase:
    case_id: str
    patient_id: str
    t: date
    label: int  # 0/1 ground truth; reports only, never shown in a CaseView


def default_readers() -> list[Reader]:
    return [Reader(f"J{i}", "junior") for i in range(1, 5)] + \
           [Reader(f"S{i}", "senior") for i in range(1, 5)]


@dataclass
class StudyPlan:
    cases: list[StudyCase]
    readers: list[Reader]
    assignments: dict  # arm -> {case_id -> reader_id}
    class_counts: tuple[int, int]
    per_reader: int
    window_days: int
    seed: int

    def case(self, case_id: str) -> StudyCase:
        for c in self.cases:
            if c.case_id == case_id:
                return c
        raise StudyDesignError(f"unknown case {case_id!r}")

    def reader_of(self, case_id: str, arm: str) -> str:
        return self.assignments[arm][case_id]

    def cases_for(self, reader_id: str, arm: str) -> list[StudyCase]:
        ids = [cid for cid, rid in self.assignments[arm].items() if rid == reader_id]
        return sorted((self.case(cid) for cid in ids), key=lambda c: c.case_id)

    def validate(self) -> None:
        n_pos, n_neg = self.class_counts
        n_cases = n_pos + n_neg
        if len(self.cases) != n_cases:
            raise StudyDesignError(f"expected {n_cases} cases, have {len(self.cases)}")
        if sum(c.label for c in self.cases) != n_pos:
            raise StudyDesignError("positive case count does not match the design")
        patients = {c.patient_id for c in self.cases}
        if len(patients) != n_cases:
            raise StudyDesignError("cases must come from distinct patients")
        if len(self.readers) * self.per_reader != n_cases:
            raise StudyDesignError("readers x per_reader must equal the case count")
        for arm in ARMS:
            amap = self.assignments[arm]
            if sorted(amap) != sorted(c.case_id for c in self.cases):
                raise StudyDesignError(f"arm {arm} does not cover every case exactly once")
            loads = {}
            for rid in amap.values():
                loads[rid] = loads.get(rid, 0) + 1
            if any(v != self.per_reader for v in loads.values()) or \
                    len(loads) != len(self.readers):
                raise StudyDesignError(f"arm {arm} reader loads are not {self.per_reader} each")
        for cid in self.assignments[ARMS[0]]:
            if self.assignments[ARMS[0]][cid] == self.assignments[ARMS[1]][cid]:
                raise StudyDesignError(f"case {cid} has the same reader in both arms")

    def as_dict(self) -> dict:
        return {
            "cases": [
                {"case_id": c.case_id, "patient_id": c.patient_id,
                 "t": c.t.isoformat(), "label": c.label}
                for c in self.cases
            ],
            "readers": [{"reader_id": r.reader_id, "seniority": r.seniority}
                        for r in self.readers],
            "assignments": self.assignments,
            "class_counts": list(self.class_counts),
            "per_reader": self.per_reader,
            "window_days": self.window_days,
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "StudyPlan":
        obj = json.loads(text)
        plan = cls(
            cases=[StudyCase(c["case_id"], c["patient_id"],
                             date.fromisoformat(c["t"]), int(c["label"]))
                   for c in obj["cases"]],
            readers=[Reader(r["reader_id"], r["seniority"]) for r in obj["readers"]],
            assignments={arm: dict(v) for arm, v in obj["assignments"].items()},
            class_counts=tuple(obj["class_counts"]),
            per_reader=int(obj["per_reader"]),
            window_days=int(obj["window_days"]),
            seed=int(obj["seed"]),
        )
        plan.validate()
        return plan


def design_study(case_pool: Iterable[StudyCase], readers: Optional[list[Reader]] = None,
                 class_counts: tuple[int, int] = (38, 82), per_reader: int = 15,
                 window_days: int = 90, seed: int = 0) -> StudyPlan:
    """Sample cases and assign them to readers per arm, deterministically.

    Cases are drawn one per patient; positives are dealt round-robin so
    every reader sees a near-equal class mix; arm MD_AI rotates the case
    blocks by one reader so nobody re-reads a case.
    """
    readers = list(readers) if readers is not None else default_readers()
    n_pos, n_neg = class_counts
    n_cases = n_pos + n_neg
    if len(readers) < 2:
        raise StudyDesignError("need at least two readers")
    if n_cases % len(readers) != 0 or n_cases // len(readers) != per_reader:
        raise StudyDesignError(
            f"readers x per_reader must equal {n_cases}, got "
            f"{len(readers)} x {per_reader}"
        )
    for r in readers:
        if r.seniority not in SENIORITIES:
            raise StudyDesignError(f"unknown seniority {r.seniority!r}")

    rng = np.random.default_rng(seed)
    pool = sorted(case_pool, key=lambda c: c.case_id)

    def sample(labeled: int, count: int, used_patients: set[str], kind: str) -> list[StudyCase]:
        candidates = [c for c in pool if c.label == labeled]
        order = rng.permutation(len(candidates))
        out: list[StudyCase] = []
        for idx in order:
            c = candidates[idx]
            if c.patient_id in used_patients:
                continue
            used_patients.add(c.patient_id)
            out.append(c)
            if len(out) == count:
                return out
        raise StudyDesignError(
            f"insufficient {kind} cases: need {count} on distinct patients, "
            f"found {len(out)}"
        )

    used: set[str] = set()
    positives = sample(1, n_pos, used, "positive")
    negatives = sample(0, n_neg, used, "negative")

    blocks: list[list[StudyCase]] = [[] for _ in readers]
    for i, c in enumerate(positives):
        blocks[i % len(readers)].append(c)
    spots = [(b, per_reader - len(blocks[b])) for b in range(len(readers))]
    neg_iter = iter(negatives)
    for b, free in spots:
        for _ in range(free):
            blocks[b].append(next(neg_iter))

    md_map = {}
    ai_map = {}
    for b, block in enumerate(blocks):
        for c in block:
            md_map[c.case_id] = readers[b].reader_id
            ai_map[c.case_id] = readers[(b + 1) % len(readers)].reader_id

    plan = StudyPlan(
        cases=sorted(positives + negatives, key=lambda c: c.case_id),
        readers=readers,
        assignments={"MD": md_map, "MD_AI": ai_map},
        class_counts=class_counts,
        per_reader=per_reader,
        window_days=window_days,
        seed=seed,
    )
    plan.validate()
    return plan


def case_view(plan: StudyPlan, store: EventStore, case_id: str, arm: str,
              model: Optional[Model] = None, zones: Optional[Zones] = None,
              top_k: int = 10) -> dict:
    """What a reader sees for one case: the patient's history up to t, and
    in the MD_AI arm the dashboard payload. Never the label, never any
    event after t."""
    if arm not in ARMS:
        raise EstimateError(f"unknown arm {arm!r}")
    c = plan.case(case_id)
    events = [
        {
            "timestamp": ev.timestamp.isoformat(),
            "kind": ev.kind,
            "code": ev.code,
            "value": ev.value,
            "unit": ev.unit,
        }
        for ev in store.events_for(c.patient_id)
        if ev.timestamp <= c.t
    ]
    view = {
        "case_id": c.case_id,
        "arm": arm,
        "as_of": c.t.isoformat(),
        "events": events,
        "dashboard": None,
    }
    if arm == "MD_AI":
        if model is None or zones is None:
            raise EstimateError("MD_AI case views need the model and zones")
        view["dashboard"] = build_dashboard_payload(
            store, model, zones, c.patient_id, c.t, top_k=top_k
        )
    return view


@dataclass(frozen=True)
class Estimate:
    reader_id: str
    case_id: str
    arm: str
    risk_pct: int
    submitted_at: str

    def key(self) -> tuple[str, str, str]:
        return (self.reader_id, self.case_id, self.arm)


class EstimateLog:
    """Append-only NDJSON estimate store; the log is the source of truth.

    Concurrent submissions serialize through a lock; an identical
    resubmission returns the original receipt, a conflicting one fails.
    """

    def __init__(self, path: Path | str):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._by_key: dict[tuple, dict] = {}
        self._seq = 0
        if self.path.exists():
            for line in self.path.read_text().splitlines():
                if not line.strip():
                    continue
                rec = json.loads(line)
                self._by_key[(rec["reader_id"], rec["case_id"], rec["arm"])] = rec
                self._seq = max(self._seq, rec["seq"])

    def __len__(self) -> int:
        return len(self._by_key)

    def estimates(self) -> list[Estimate]:
        recs = sorted(self._by_key.values(), key=lambda r: r["seq"])
        return [Estimate(r["reader_id"], r["case_id"], r["arm"],
                         r["risk_pct"], r["submitted_at"]) for r in recs]

    def answered(self, reader_id: str, arm: str) -> set[str]:
        return {k[1] for k in self._by_key if k[0] == reader_id and k[2] == arm}

    def submit(self, plan: StudyPlan, reader_id: str, case_id: str, arm: str,
               risk_pct: int) -> dict:
        if arm not in ARMS:
            raise EstimateError(f"unknown arm {arm!r}")
        if not isinstance(risk_pct, int) or isinstance(risk_pct, bool) \
                or not (0 <= risk_pct <= 100):
            raise EstimateError(f"risk_pct must be an integer in [0, 100], got {risk_pct!r}")
        amap = plan.assignments.get(arm, {})
        if amap.get(case_id) != reader_id:
            raise EstimateError(
                f"case {case_id!r} is not assigned to reader {reader_id!r} in arm {arm}"
            )
        with self._lock:
            key = (reader_id, case_id, arm)
            existing = self._by_key.get(key)
            if existing is not None:
                if existing["risk_pct"] == risk_pct:
                    return dict(existing)
                raise EstimateConflictError(
                    f"estimate for {key} already recorded as {existing['risk_pct']}"
                )
            self._seq += 1
            rec = {
                "seq": self._seq,
                "reader_id": reader_id,
                "case_id": case_id,
                "arm": arm,
                "risk_pct": risk_pct,
                "submitted_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            }
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            self._by_key[key] = rec
            return dict(rec)


def simulate_readers(plan: StudyPlan, log: EstimateLog, skill: float = 0.8,
                     seed: int = 0, arms: Iterable[str] = ARMS) -> int:
    """Skill-parameterized simulated physicians: the estimate blends the
    true label with uniform noise (skill 1.0 reads the chart perfectly,
    skill 0.0 is a coin flip). Fills every unanswered assignment."""
    if not (0.0 <= skill <= 1.0):
        raise EstimateError("skill must be in [0, 1]")
    rng = np.random.default_rng(seed)
    submitted = 0
    for arm in arms:
        for case_id in sorted(plan.assignments[arm]):
            reader_id = plan.assignments[arm][case_id]
            if case_id in log.answered(reader_id, arm):
                continue
            label = plan.case(case_id).label
            noise = float(rng.random())
            pct = int(round(100.0 * (skill * label + (1.0 - skill) * noise)))
            log.submit(plan, reader_id, case_id, arm, pct)
            submitted += 1
    return submitted


def _arm_scores(plan: StudyPlan, estimates: list[Estimate], arm: str):
    by_case = {e.case_id: e.risk_pct for e in estimates if e.arm == arm}
    missing = [c.case_id for c in plan.cases if c.case_id not in by_case]
    scores = [float(by_case[c.case_id]) for c in plan.cases if c.case_id in by_case]
    labels = [float(c.label) for c in plan.cases if c.case_id in by_case]
    return scores, labels, missing


def study_report(plan: StudyPlan, estimates: list[Estimate],
                 model_scores: dict[str, float], zones: Zones,
                 partial: bool = False) -> dict:
    """Table-2/3 style report plus the case-level disagreement lists.

    Human arms are ranked by raw risk percentage and binarized at >50;
    the AI row uses the model scores at the three zone thresholds.
    Disagreements compare readers (>50) with the AI at the F1 threshold.
    """
    expected = len(plan.cases) * len(ARMS)
    have = len([e for e in estimates if e.arm in ARMS])
    if have < expected and not partial:
        raise EstimateError(
            f"only {have}/{expected} estimates present; pass partial=True "
            "for an interim report"
        )

    labels_all = [float(c.label) for c in plan.cases]
    ai_scores = [float(model_scores[c.case_id]) for c in plan.cases]
    ai_block = {
        "ROC": roc_auc(ai_scores, labels_all),
        "PRC": pr_auc(ai_scores, labels_all),
        "thresholds": {},
    }
    for name, thr in (("F2", zones.t_f2), ("F1", zones.t_f1), ("F05", zones.t_f05)):
        cm = confusion_metrics(ai_scores, labels_all, thr)
        ai_block["thresholds"][name] = {k: cm[k] for k in ("SEN", "SPEC", "PPV")}

    arms_block = {}
    subgroup_block = {}
    disagreements = {}
    seniority_of = {r.reader_id: r.seniority for r in plan.readers}
    ai_pred = {c.case_id: model_scores[c.case_id] >= zones.t_f1 for c in plan.cases}
    for arm in ARMS:
        scores, labels, missing = _arm_scores(plan, estimates, arm)
        if missing and not partial:
            raise EstimateError(f"arm {arm} missing estimates for {missing[:3]}...")
        if len(set(labels)) == 2:
            cm = confusion_metrics(scores, labels, HUMAN_CUTOFF)
            arms_block[arm] = {
                "ROC": roc_auc(scores, labels),
                "PRC": pr_auc(scores, labels),
                "SEN": cm["SEN"], "SPEC": cm["SPEC"], "PPV": cm["PPV"],
                "cutoff": ">50%",
                "n_estimates": len(scores),
            }
        else:
            # a partial log can leave an arm without both classes; its
            # metrics are reported absent, never zero
            arms_block[arm] = {
                "ROC": None, "PRC": None, "SEN": None, "SPEC": None, "PPV": None,
                "cutoff": ">50%", "n_estimates": len(scores),
            }
        by_case = {e.case_id: e.risk_pct for e in estimates if e.arm == arm}
        for seniority in SENIORITIES:
            pairs = [(float(by_case[c.case_id]), float(c.label))
                     for c in plan.cases
                     if c.case_id in by_case
                     and seniority_of[plan.reader_of(c.case_id, arm)] == seniority]
            if pairs and len({l for _, l in pairs}) == 2:
                s, l = zip(*pairs)
                subgroup_block.setdefault(arm, {})[seniority] = roc_auc(list(s), list(l))
        ai_right_reader_wrong = []
        reader_right_ai_wrong = []
        for c in plan.cases:
            if c.case_id not in by_case:
                continue
            reader_correct = (by_case[c.case_id] > 50) == bool(c.label)
            ai_correct = ai_pred[c.case_id] == bool(c.label)
            if ai_correct and not reader_correct:
                ai_right_reader_wrong.append(c.case_id)
            elif reader_correct and not ai_correct:
                reader_right_ai_wrong.append(c.case_id)
        disagreements[arm] = {
            "ai_right_reader_wrong": ai_right_reader_wrong,
            "reader_right_ai_wrong": reader_right_ai_wrong,
        }

    return {
        "n_cases": len(plan.cases),
        "class_counts": list(plan.class_counts),
        "window_days": plan.window_days,
        "AI": ai_block,
        "arms": arms_block,
        "subgroups": subgroup_block,
        "disagreements": disagreements,
        "partial": partial,
    }


def _fmt(v, digits=3) -> str:
    if v is None:
        return "-"
    return f"{v:.{digits}f}"


def format_table2(ai_roc, ai_prc, ai_rows, md_row, md_ai_row) -> str:
    """Fixed-layout main results table.

    ai_rows: three (SEN, SPEC, PPV) tuples for the F2/F1/F0.5 thresholds.
    md_row / md_ai_row: (ROC, PRC, SEN, SPEC, PPV) at the >50% cutoff.
    """
    lines = [
        f"{'':5s} {'ROC':5s}  {'PRC':5s}  {'SEN':5s}  {'SPEC':5s}  {'PPV':5s}  thrs",
    ]
    thrs = ("F2", "F1", "F0.5")
    for i, (sen, spec, ppv) in enumerate(ai_rows):
        head = "AI" if i == 0 else ""
        roc = _fmt(ai_roc) if i == 0 else ""
        prc = _fmt(ai_prc) if i == 0 else ""
        lines.append(f"{head:5s} {roc:5s}  {prc:5s}  {_fmt(sen):5s}  "
                     f"{_fmt(spec):5s}  {_fmt(ppv):5s}  {thrs[i]}")
    for name, row in (("MD", md_row), ("MD+AI", md_ai_row)):
        roc, prc, sen, spec, ppv = row
        lines.append(f"{name:5s} {_fmt(roc):5s}  {_fmt(prc):5s}  {_fmt(sen):5s}  "
                     f"{_fmt(spec):5s}  {_fmt(ppv):5s}  >50%")
    return "\n".join(line.rstrip() for line in lines) + "\n"


def format_table3(md_junior, md_senior, md_ai_junior, md_ai_senior) -> str:
    """Subgroup ROC table: junior vs senior readers, per arm."""
    lines = [
        "       Junior MD  Senior MD",
        f"MD     {_fmt(md_junior, 4)}     {_fmt(md_senior, 4)}",
        f"MD+AI  {_fmt(md_ai_junior, 4)}     {_fmt(md_ai_senior, 4)}",
    ]
    return "\n".join(lines) + "\n"


def report_tables(report: dict) -> tuple[str, str]:
    """Render a study report into the two plain-text tables."""
    ai = report["AI"]
    rows = [tuple(ai["thresholds"][k][m] for m in ("SEN", "SPEC", "PPV"))
            for k in ("F2", "F1", "F05")]
    md = report["arms"]["MD"]
    md_ai = report["arms"]["MD_AI"]
    t2 = format_table2(
        ai["ROC"], ai["PRC"], rows,
        (md["ROC"], md["PRC"], md["SEN"], md["SPEC"], md["PPV"]),
        (md_ai["ROC"], md_ai["PRC"], md_ai["SEN"], md_ai["SPEC"], md_ai["PPV"]),
    )
    sub = report["subgroups"]
    t3 = format_table3(
        sub.get("MD", {}).get("junior"), sub.get("MD", {}).get("senior"),
        sub.get("MD_AI", {}).get("junior"), sub.get("MD_AI", {}).get("senior"),
    )
    return t2, t3
