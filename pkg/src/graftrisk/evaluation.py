"""Ranking metrics, patient-level splitting, traffic-light calibration and
the repeated internal-validation harness.

Undefined metrics raise or are reported as absent values, never silently 0.
All splitting happens on patient ids so no patient's data points cross a
fold boundary.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .cohort import LabeledDataset
from .errors import SplitError, UndefinedMetricError
from .gbrt import Hyperparams, Model, fit

DEFAULT_RATIOS = (0.70, 0.15, 0.15)
DEFAULT_WINDOWS = (90, 180, 360)


def _as_arrays(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-d and the same length")
    return s, y


def roc_auc(scores, labels) -> float:
    """Probability a random positive outranks a random negative (ties 1/2),
    computed by the rank-sum formula."""
    s, y = _as_arrays(scores, labels)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("roc_auc needs both classes")
    n = len(s)
    order = np.argsort(s, kind="mergesort")
    ss = s[order]
    ranks = np.empty(n, dtype=np.float64)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and ss[j + 1] == ss[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_pos = float(ranks[y == 1].sum())
    return (rank_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def pr_auc(scores, labels) -> float:
    """Average precision with tied scores processed as one group:
    sum over distinct thresholds of (delta recall * precision)."""
    s, y = _as_arrays(scores, labels)
    n_pos = int((y == 1).sum())
    if n_pos == 0:
        raise UndefinedMetricError("pr_auc needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    ss = s[order]
    yy = y[order]
    ap = 0.0
    r_prev = 0.0
    tp = 0
    fp = 0
    i = 0
    n = len(ss)
    while i < n:
        j = i
        while j + 1 < n and ss[j + 1] == ss[i]:
            j += 1
        grp = yy[i:j + 1]
        tp += int((grp == 1).sum())
        fp += (j - i + 1) - int((grp == 1).sum())
        r = tp / n_pos
        p = tp / (tp + fp)
        ap += (r - r_prev) * p
        r_prev = r
        i = j + 1
    return ap


def fbeta(precision: float, recall: float, beta: float) -> float:
    denom = beta * beta * precision + recall
    if denom == 0.0:
        return 0.0
    return (1.0 + beta * beta) * precision * recall / denom


def confusion_metrics(scores, labels, threshold: float) -> dict:
    """SEN/SPEC/PPV and F-scores at `score >= threshold => positive`.

    PPV is None (absent) when there are no positive predictions; the
    F-scores are 0 whenever there is no true positive.
    """
    s, y = _as_arrays(scores, labels)
    pred = s >= threshold
    tp = int(((y == 1) & pred).sum())
    fp = int(((y == 0) & pred).sum())
    fn = int(((y == 1) & ~pred).sum())
    tn = int(((y == 0) & ~pred).sum())
    sen = tp / (tp + fn) if (tp + fn) else None
    spec = tn / (tn + fp) if (tn + fp) else None
    ppv = tp / (tp + fp) if (tp + fp) else None
    p = ppv if ppv is not None else 0.0
    r = sen if sen is not None else 0.0
    return {
        "TP": tp, "FP": fp, "TN": tn, "FN": fn,
        "SEN": sen, "SPEC": spec, "PPV": ppv,
        "F1": fbeta(p, r, 1.0),
        "F2": fbeta(p, r, 2.0),
        "F05": fbeta(p, r, 0.5),
    }


@dataclass(frozen=True)
class Zones:
    """Traffic-light thresholds: yellow starts at the F2 optimum, red at the
    F0.5 optimum; the F1 optimum is the dashed marker inside yellow."""

    t_f2: float
    t_f1: float
    t_f05: float

    def __post_init__(self):
        if not (self.t_f2 <= self.t_f1 <= self.t_f05):
            raise ValueError("zone thresholds must satisfy t_f2 <= t_f1 <= t_f05")

    def as_dict(self) -> dict:
        return {"t_f2": self.t_f2, "t_f1": self.t_f1, "t_f05": self.t_f05}

    @classmethod
    def from_dict(cls, d: dict) -> "Zones":
        return cls(float(d["t_f2"]), float(d["t_f1"]), float(d["t_f05"]))


def calibrate_zones(dev_scores, dev_labels) -> Zones:
    """Sweep distinct dev scores as thresholds and pick the F2/F1/F0.5
    optima (ties -> highest threshold); sort the three optima ascending to
    enforce the zone ordering."""
    s, y = _as_arrays(dev_scores, dev_labels)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("zone calibration needs both classes in dev")
    order = np.argsort(-s, kind="mergesort")
    ss = s[order]
    yy = y[order]
    best = {2.0: (-1.0, 0.0), 1.0: (-1.0, 0.0), 0.5: (-1.0, 0.0)}
    tp = 0
    fp = 0
    i = 0
    n = len(ss)
    while i < n:
        j = i
        while j + 1 < n and ss[j + 1] == ss[i]:
            j += 1
        grp_pos = int((yy[i:j + 1] == 1).sum())
        tp += grp_pos
        fp += (j - i + 1) - grp_pos
        thr = float(ss[i])
        p = tp / (tp + fp)
        r = tp / n_pos
        for beta in (2.0, 1.0, 0.5):
            f = fbeta(p, r, beta)
            # descending threshold order: strict improvement keeps the
            # highest-threshold optimum on ties
            if f > best[beta][0]:
                best[beta] = (f, thr)
        i = j + 1
    t2, t1, t05 = sorted((best[2.0][1], best[1.0][1], best[0.5][1]))
    return Zones(t2, t1, t05)


def zone_of(score: float, zones: Zones) -> str:
    if score < zones.t_f2:
        return "green"
    if score < zones.t_f05:
        return "yellow"
    return "red"


@dataclass(frozen=True)
class Split:
    train: frozenset[str]
    dev: frozenset[str]
    test: frozenset[str]
    ratios: tuple[float, float, float]
    seed: int

    def fold_of(self, patient_id: str) -> str:
        if patient_id in self.train:
            return "train"
        if patient_id in self.dev:
            return "dev"
        if patient_id in self.test:
            return "test"
        raise KeyError(patient_id)


def _fold_sizes(n: int, ratios: Sequence[float]) -> list[int]:
    quotas = [n * r for r in ratios]
    sizes = [int(q) for q in quotas]
    remainders = [q - s for q, s in zip(quotas, sizes)]
    # largest remainder; remainder ties go to the later fold
    for _ in range(n - sum(sizes)):
        k = max(range(len(ratios)), key=lambda i: (remainders[i], i))
        sizes[k] += 1
        remainders[k] = -1.0
    # every fold gets at least one patient (n >= 3 is guaranteed upstream)
    while min(sizes) == 0:
        donor = max(range(len(sizes)), key=lambda i: (sizes[i], -i))
        sizes[sizes.index(0)] += 1
        sizes[donor] -= 1
    return sizes


def split_patients(patient_ids: Sequence[str], ratios=DEFAULT_RATIOS, seed: int = 0) -> Split:
    """Seeded shuffle, then contiguous partition by patient count with
    largest-remainder rounding."""
    ids = list(patient_ids)
    if len(set(ids)) != len(ids):
        raise SplitError("patient ids must be unique")
    if len(ids) < 3:
        raise SplitError(f"need at least 3 patients, got {len(ids)}")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) <= 0:
        raise SplitError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ids))
    shuffled = [ids[i] for i in perm]
    n_train, n_dev, n_test = _fold_sizes(len(ids), ratios)
    return Split(
        train=frozenset(shuffled[:n_train]),
        dev=frozenset(shuffled[n_train:n_train + n_dev]),
        test=frozenset(shuffled[n_train + n_dev:]),
        ratios=tuple(ratios),
        seed=seed,
    )


@dataclass
class RepeatResult:
    repeat: int
    window_days: int
    roc: float
    prc: float
    zones: Zones
    zone_metrics: dict  # threshold name -> {SEN, SPEC, PPV}
    n_train: int
    n_dev: int
    n_test: int


@dataclass
class ValidationReport:
    windows: tuple[int, ...]
    n_repeats: int
    seed: int
    ratios: tuple[float, float, float]
    hyperparams: dict
    repeats: list[RepeatResult]
    label_monotonicity_ok: Optional[bool] = None

    def results_for(self, window: int) -> list[RepeatResult]:
        return [r for r in self.repeats if r.window_days == window]

    def mean_roc(self, window: int) -> float:
        rs = self.results_for(window)
        return sum(r.roc for r in rs) / len(rs)

    def mean_prc(self, window: int) -> float:
        rs = self.results_for(window)
        return sum(r.prc for r in rs) / len(rs)

    def mean_zone_metric(self, window: int, thr_name: str, metric: str) -> Optional[float]:
        vals = [r.zone_metrics[thr_name][metric] for r in self.results_for(window)]
        vals = [v for v in vals if v is not None]
        return sum(vals) / len(vals) if vals else None

    def pooled(self) -> dict:
        return dict(self._pooled)

    _pooled: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "windows": list(self.windows),
            "n_repeats": self.n_repeats,
            "seed": self.seed,
            "ratios": list(self.ratios),
            "hyperparams": self.hyperparams,
            "label_monotonicity_ok": self.label_monotonicity_ok,
            "summary": {
                str(w): {
                    "mean_roc": self.mean_roc(w),
                    "mean_prc": self.mean_prc(w),
                    "pooled_roc": self._pooled.get(w, {}).get("roc"),
                    "pooled_prc": self._pooled.get(w, {}).get("prc"),
                    "zone_metrics": {
                        thr: {
                            m: self.mean_zone_metric(w, thr, m)
                            for m in ("SEN", "SPEC", "PPV")
                        }
                        for thr in ("F2", "F1", "F05")
                    },
                }
                for w in self.windows
            },
            "repeats": [
                {
                    "repeat": r.repeat,
                    "window_days": r.window_days,
                    "roc": r.roc,
                    "prc": r.prc,
                    "zones": r.zones.as_dict(),
                    "zone_metrics": r.zone_metrics,
                    "n_train": r.n_train,
                    "n_dev": r.n_dev,
                    "n_test": r.n_test,
                }
                for r in self.repeats
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True, indent=2)

    def to_text(self) -> str:
        """Aligned plain-text tables mirroring the internal-validation layout."""
        lines = [
            f"Internal validation: {self.n_repeats} repeats, "
            f"{int(self.ratios[0] * 100)}/{int(self.ratios[1] * 100)}/"
            f"{int(self.ratios[2] * 100)} patient-level splits",
            "",
            "Days  ROC   PRC",
        ]
        for w in self.windows:
            lines.append(f"{w:<5d} {self.mean_roc(w):.2f}  {self.mean_prc(w):.2f}")
        lines.append("")
        lines.append("Window  thrs  SEN    SPEC   PPV")
        for w in self.windows:
            for thr, label in (("F2", "F2"), ("F1", "F1"), ("F05", "F0.5")):
                sen = self.mean_zone_metric(w, thr, "SEN")
                spec = self.mean_zone_metric(w, thr, "SPEC")
                ppv = self.mean_zone_metric(w, thr, "PPV")
                fmt = lambda v: "  -  " if v is None else f"{v:.3f}"
                lines.append(f"{w:<7d} {label:<5s} {fmt(sen)}  {fmt(spec)}  {fmt(ppv)}")
        return "\n".join(lines) + "\n"


def subset_dataset(dataset: LabeledDataset, rows: np.ndarray) -> LabeledDataset:
    return LabeledDataset(
        schema=dataset.schema,
        patient_ids=[dataset.patient_ids[i] for i in rows],
        times=[dataset.times[i] for i in rows],
        X=dataset.X[rows],
        y=dataset.y[rows],
        window_days=dataset.window_days,
        censor_policy=dataset.censor_policy,
        n_censored=dataset.n_censored,
        n_total_datapoints=dataset.n_total_datapoints,
    )


def label_monotonicity_ok(datasets: dict[int, LabeledDataset]) -> bool:
    """Positives at a window must stay positive at every longer window."""
    windows = sorted(datasets)
    labels_by_window = {}
    for w in windows:
        ds = datasets[w]
        labels_by_window[w] = {
            (pid, t): y for pid, t, y in zip(ds.patient_ids, ds.times, ds.y)
        }
    for shorter, longer in zip(windows, windows[1:]):
        longer_map = labels_by_window[longer]
        for key, y in labels_by_window[shorter].items():
            if y == 1.0 and key in longer_map and longer_map[key] != 1.0:
                return False
    return True


def _kfold_assignments(patient_ids: list[str], n_folds: int, seed: int) -> list[list[str]]:
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(patient_ids))
    folds: list[list[str]] = [[] for _ in range(n_folds)]
    for pos, idx in enumerate(perm):
        folds[pos % n_folds].append(patient_ids[idx])
    return folds


def repeated_validation(
    dataset_builder: Callable[[int], LabeledDataset],
    hp: Hyperparams,
    n_repeats: int = 10,
    windows: Sequence[int] = DEFAULT_WINDOWS,
    ratios=DEFAULT_RATIOS,
    seed: int = 0,
    n_jobs: int = 1,
    mode: str = "monte_carlo",
) -> ValidationReport:
    """Train/calibrate/score over repeated patient-level splits.

    monte_carlo mode draws a fresh seeded 70/15/15 split per repeat (seeds
    are seed + repeat index); kfold mode rotates classic disjoint test
    folds. A failed repeat aborts the run; nothing is silently skipped.
    """
    if mode not in ("monte_carlo", "kfold"):
        raise ValueError(f"unknown mode {mode!r}")
    datasets = {w: dataset_builder(w) for w in windows}
    all_patients = sorted({pid for ds in datasets.values() for pid in ds.patient_ids})
    folds = _kfold_assignments(all_patients, n_repeats, seed) if mode == "kfold" else None

    repeats: list[RepeatResult] = []
    pooled_scores: dict[int, list[np.ndarray]] = {w: [] for w in windows}
    pooled_labels: dict[int, list[np.ndarray]] = {w: [] for w in windows}
    for rep in range(n_repeats):
        if mode == "monte_carlo":
            split = split_patients(all_patients, ratios, seed + rep)
        else:
            test_ids = frozenset(folds[rep])
            dev_ids = frozenset(folds[(rep + 1) % n_repeats])
            train_ids = frozenset(all_patients) - test_ids - dev_ids
            split = Split(train_ids, dev_ids, test_ids, tuple(ratios), seed)
        for w in windows:
            ds = datasets[w]
            train_rows = ds.rows_for_patients(set(split.train))
            dev_rows = ds.rows_for_patients(set(split.dev))
            test_rows = ds.rows_for_patients(set(split.test))
            model = fit(subset_dataset(ds, train_rows), hp, n_jobs=n_jobs)
            dev_scores = model.predict_matrix(ds.X[dev_rows])
            zones = calibrate_zones(dev_scores, ds.y[dev_rows])
            test_scores = model.predict_matrix(ds.X[test_rows])
            test_y = ds.y[test_rows]
            zone_metrics = {}
            for name, thr in (("F2", zones.t_f2), ("F1", zones.t_f1), ("F05", zones.t_f05)):
                cm = confusion_metrics(test_scores, test_y, thr)
                zone_metrics[name] = {k: cm[k] for k in ("SEN", "SPEC", "PPV")}
            repeats.append(RepeatResult(
                repeat=rep,
                window_days=w,
                roc=roc_auc(test_scores, test_y),
                prc=pr_auc(test_scores, test_y),
                zones=zones,
                zone_metrics=zone_metrics,
                n_train=len(train_rows),
                n_dev=len(dev_rows),
                n_test=len(test_rows),
            ))
            pooled_scores[w].append(test_scores)
            pooled_labels[w].append(test_y)

    report = ValidationReport(
        windows=tuple(windows),
        n_repeats=n_repeats,
        seed=seed,
        ratios=tuple(ratios),
        hyperparams=hp.as_dict(),
        repeats=repeats,
        label_monotonicity_ok=label_monotonicity_ok(datasets) if len(windows) > 1 else None,
    )
    report._pooled = {
        w: {
            "roc": roc_auc(np.concatenate(pooled_scores[w]), np.concatenate(pooled_labels[w])),
            "prc": pr_auc(np.concatenate(pooled_scores[w]), np.concatenate(pooled_labels[w])),
        }
        for w in windows
    }
    return report
