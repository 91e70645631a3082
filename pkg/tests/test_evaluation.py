import numpy as np
import pytest

from graftrisk.errors import SplitError, UndefinedMetricError
from graftrisk.evaluation import (
    Zones,
    calibrate_zones,
    confusion_metrics,
    fbeta,
    label_monotonicity_ok,
    pr_auc,
    repeated_validation,
    roc_auc,
    split_patients,
    subset_dataset,
    zone_of,
)
from graftrisk.gbrt import Hyperparams

from conftest import make_dataset


def roc_pairwise_oracle(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return (wins + 0.5 * ties) / (len(pos) * len(neg))


def ap_step_oracle(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    n_pos = int(labels.sum())
    ap = 0.0
    r_prev = 0.0
    for thr in sorted(set(scores.tolist()), reverse=True):
        pred = scores >= thr
        tp = int((labels[pred] == 1).sum())
        r = tp / n_pos
        p = tp / int(pred.sum())
        ap += (r - r_prev) * p
        r_prev = r
    return ap


class TestRocAuc:
    def test_textbook(self):
        # pairs: 6 total of which (0.9,0.8) win, (0.9,0.2) win, (0.3,0.8)
        # lose, (0.3,0.2) win -> 0.75 by pairwise counting
        assert roc_auc([0.9, 0.8, 0.3, 0.2], [1, 0, 1, 0]) == 0.75

    def test_perfect(self):
        assert roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0

    def test_all_ties(self):
        assert roc_auc([0.5] * 6, [1, 0, 1, 0, 0, 0]) == 0.5

    def test_single_class(self):
        with pytest.raises(UndefinedMetricError):
            roc_auc([0.5, 0.6], [1, 1])

    def test_matches_pairwise_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(60):
            n = int(rng.integers(5, 200))
            scores = rng.choice(rng.normal(size=max(2, n // 3)), size=n)
            labels = (rng.random(n) < 0.4).astype(int)
            if labels.sum() in (0, n):
                continue
            assert abs(roc_auc(scores, labels) - roc_pairwise_oracle(scores, labels)) <= 1e-12

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(1)
        scores = rng.normal(size=100)
        labels = (rng.random(100) < 0.3).astype(int)
        assert roc_auc(scores, labels) == roc_auc(np.exp(scores), labels)


class TestPrAuc:
    def test_textbook(self):
        # descending-score labels [1, 0, 1]: AP = (1/1 + 2/3) / 2
        assert pr_auc([0.9, 0.5, 0.1], [1, 0, 1]) == pytest.approx(
            (1.0 + 2.0 / 3.0) / 2.0, abs=1e-15)

    def test_perfect_is_exactly_one(self):
        for n_pos, n_neg in ((1, 5), (3, 7), (5, 5)):
            scores = list(range(n_pos + n_neg, 0, -1))
            labels = [1] * n_pos + [0] * n_neg
            assert pr_auc(scores, labels) == 1.0

    def test_all_ties_equals_prevalence_exactly(self):
        for n_pos, n_neg in ((3, 9), (1, 7), (5, 15)):
            labels = [1] * n_pos + [0] * n_neg
            assert pr_auc([0.7] * len(labels), labels) == n_pos / len(labels)

    def test_no_positives(self):
        with pytest.raises(UndefinedMetricError):
            pr_auc([0.1, 0.2], [0, 0])

    def test_matches_step_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(60):
            n = int(rng.integers(4, 150))
            scores = rng.choice(rng.normal(size=max(2, n // 4)), size=n)
            labels = (rng.random(n) < 0.35).astype(int)
            if labels.sum() == 0:
                continue
            assert abs(pr_auc(scores, labels) - ap_step_oracle(scores, labels)) <= 1e-12

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(3)
        scores = rng.normal(size=80)
        labels = (rng.random(80) < 0.3).astype(int)
        if labels.sum() == 0:
            labels[0] = 1
        assert pr_auc(scores, labels) == pr_auc(3.0 * scores + 1.0, labels)


class TestConfusionMetrics:
    def test_textbook_counts(self):
        # TP=2 FP=1 TN=3 FN=2 -> SEN 0.5, SPEC 0.75, PPV 2/3
        scores = [0.9, 0.8, 0.7, 0.4, 0.3, 0.2, 0.1, 0.05]
        labels = [1, 1, 0, 1, 1, 0, 0, 0]
        cm = confusion_metrics(scores, labels, 0.5)
        assert (cm["TP"], cm["FP"], cm["TN"], cm["FN"]) == (2, 1, 3, 2)
        assert cm["SEN"] == 0.5
        assert cm["SPEC"] == 0.75
        assert cm["PPV"] == pytest.approx(2.0 / 3.0, abs=1e-12)

    def test_fbeta_fixed_point(self):
        for beta in (0.5, 1.0, 2.0):
            assert fbeta(0.4, 0.4, beta) == pytest.approx(0.4, abs=1e-12)

    def test_f2_formula(self):
        # P=0.5, R=1.0: F2 = 5*0.5/ (4*0.5 + 1) = 0.8333...
        assert fbeta(0.5, 1.0, 2.0) == pytest.approx(5 * 0.5 / 3.0, abs=1e-12)

    def test_ppv_absent_when_no_positive_predictions(self):
        cm = confusion_metrics([0.1, 0.2], [1, 0], threshold=0.9)
        assert cm["PPV"] is None
        assert cm["F1"] == 0.0

    def test_threshold_rule_is_geq(self):
        cm = confusion_metrics([0.5, 0.49], [1, 0], threshold=0.5)
        assert cm["TP"] == 1 and cm["TN"] == 1


class TestSplitPatients:
    def test_largest_remainder_sizes(self):
        # 10 * (0.7, 0.15, 0.15) floors to (7, 1, 1); the leftover seat goes
        # to the later fold on a remainder tie -> (7, 1, 2)
        split = split_patients([f"p{i}" for i in range(10)], seed=0)
        assert (len(split.train), len(split.dev), len(split.test)) == (7, 1, 2)

    def test_three_patients_one_each(self):
        split = split_patients(["a", "b", "c"], seed=1)
        assert len(split.train) == len(split.dev) == len(split.test) == 1

    def test_deterministic(self):
        ids = [f"p{i}" for i in range(50)]
        assert split_patients(ids, seed=3) == split_patients(ids, seed=3)

    def test_partition_properties(self):
        ids = [f"p{i}" for i in range(97)]
        split = split_patients(ids, seed=5)
        folds = [split.train, split.dev, split.test]
        assert sum(len(f) for f in folds) == 97
        assert set().union(*folds) == set(ids)
        assert not (split.train & split.dev) and not (split.train & split.test) \
            and not (split.dev & split.test)

    def test_too_few(self):
        with pytest.raises(SplitError):
            split_patients(["a", "b"])

    def test_bad_ratios(self):
        with pytest.raises(SplitError):
            split_patients(["a", "b", "c"], ratios=(0.5, 0.2, 0.2))

    def test_duplicate_ids(self):
        with pytest.raises(SplitError):
            split_patients(["a", "a", "b"])


def sweep_oracle(scores, labels):
    best = {}
    for beta in (2.0, 1.0, 0.5):
        candidates = []
        for thr in sorted(set(scores)):
            cm = confusion_metrics(scores, labels, thr)
            p = cm["PPV"] if cm["PPV"] is not None else 0.0
            r = cm["SEN"] if cm["SEN"] is not None else 0.0
            candidates.append((fbeta(p, r, beta), thr))
        fmax = max(c[0] for c in candidates)
        best[beta] = max(thr for f, thr in candidates if f == fmax)
    return tuple(sorted((best[2.0], best[1.0], best[0.5])))


class TestCalibrateZones:
    def test_matches_sweep_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(80):
            n = int(rng.integers(6, 120))
            scores = np.round(rng.random(n), 2)
            labels = (rng.random(n) < 0.35).astype(int)
            if labels.sum() in (0, n):
                continue
            zones = calibrate_zones(scores, labels)
            assert (zones.t_f2, zones.t_f1, zones.t_f05) == sweep_oracle(
                scores.tolist(), labels.tolist())

    def test_ordering_enforced(self):
        rng = np.random.default_rng(5)
        for _ in range(40):
            n = int(rng.integers(6, 80))
            scores = rng.random(n)
            labels = (rng.random(n) < 0.4).astype(int)
            if labels.sum() in (0, n):
                continue
            z = calibrate_zones(scores, labels)
            assert z.t_f2 <= z.t_f1 <= z.t_f05

    def test_perfectly_separated(self):
        scores = [0.1, 0.2, 0.3, 0.8, 0.9]
        labels = [0, 0, 0, 1, 1]
        z = calibrate_zones(scores, labels)
        # all three optima sit at the smallest positive score
        assert z.t_f2 == z.t_f1 == z.t_f05 == 0.8

    def test_single_class(self):
        with pytest.raises(UndefinedMetricError):
            calibrate_zones([0.2, 0.4], [1, 1])

    def test_zone_of_boundaries(self):
        z = Zones(0.2, 0.35, 0.6)
        assert zone_of(0.1, z) == "green"
        assert zone_of(0.2, z) == "yellow"
        assert zone_of(0.45, z) == "yellow"
        assert zone_of(0.6, z) == "red"
        assert zone_of(0.9, z) == "red"

    def test_invalid_ordering_rejected(self):
        with pytest.raises(ValueError):
            Zones(0.5, 0.4, 0.6)


def _separable_builder(window):
    rng = np.random.default_rng(window)
    n = 400
    X = rng.normal(size=(n, 4))
    y = (X[:, 0] > 0).astype(float)
    X[:, 0] = X[:, 0] + 10.0 * y  # wide margin: trivially separable
    ds = make_dataset(X, y, window_days=window)
    ds.patient_ids = [f"p{i % 80:04d}" for i in range(n)]
    return ds


def _null_builder(window):
    rng = np.random.default_rng(1000 + window)
    n = 600
    X = rng.normal(size=(n, 5))
    y = (rng.random(n) < 0.3).astype(float)
    ds = make_dataset(X, y, window_days=window)
    ds.patient_ids = [f"p{i % 120:04d}" for i in range(n)]
    return ds


class TestRepeatedValidation:
    HP = Hyperparams(n_trees=20, learning_rate=0.3, max_depth=3,
                     min_samples_leaf=5, seed=0)

    def test_separable_data_perfect_roc(self):
        report = repeated_validation(_separable_builder, self.HP, n_repeats=3,
                                     windows=(90,), seed=0)
        assert report.mean_roc(90) == 1.0

    def test_null_labels_near_half(self):
        report = repeated_validation(_null_builder, self.HP, n_repeats=4,
                                     windows=(90,), seed=0)
        assert 0.45 <= report.mean_roc(90) <= 0.55

    def test_no_patient_overlap_anywhere(self):
        ids = [f"p{i:04d}" for i in range(30)]
        from graftrisk.evaluation import split_patients
        for rep in range(10):
            s = split_patients(ids, seed=rep)
            assert not (s.train & s.dev or s.train & s.test or s.dev & s.test)

    def test_deterministic_report(self):
        r1 = repeated_validation(_null_builder, self.HP, n_repeats=2, windows=(90,), seed=3)
        r2 = repeated_validation(_null_builder, self.HP, n_repeats=2, windows=(90,), seed=3)
        assert r1.to_json() == r2.to_json()

    def test_worker_invariance(self):
        r1 = repeated_validation(_separable_builder, self.HP, n_repeats=2,
                                 windows=(90,), seed=1, n_jobs=1)
        r4 = repeated_validation(_separable_builder, self.HP, n_repeats=2,
                                 windows=(90,), seed=1, n_jobs=4)
        assert r1.to_json() == r4.to_json()

    def test_kfold_mode(self):
        report = repeated_validation(_separable_builder, self.HP, n_repeats=4,
                                     windows=(90,), seed=0, mode="kfold")
        assert len(report.repeats) == 4

    def test_report_serialization(self):
        report = repeated_validation(_separable_builder, self.HP, n_repeats=2,
                                     windows=(90,), seed=0)
        text = report.to_text()
        assert "Days" in text and "ROC" in text and "PRC" in text
        d = report.as_dict()
        assert "90" in d["summary"]

    def test_zone_metrics_reported(self):
        report = repeated_validation(_null_builder, self.HP, n_repeats=2,
                                     windows=(90,), seed=2)
        for rep in report.repeats:
            assert set(rep.zone_metrics) == {"F2", "F1", "F05"}


class TestLabelMonotonicity:
    @staticmethod
    def _pair():
        rng = np.random.default_rng(17)
        n = 50
        X = rng.normal(size=(n, 3))
        y = (rng.random(n) < 0.3).astype(float)
        ds90 = make_dataset(X, y, window_days=90)
        ds180 = make_dataset(X, y.copy(), window_days=180)
        return ds90, ds180

    def test_consistent_windows_pass(self):
        ds90, ds180 = self._pair()
        assert label_monotonicity_ok({90: ds90, 180: ds180})

    def test_violation_detected(self):
        ds90, ds180 = self._pair()
        flip = int(np.argmax(ds90.y == 1.0))
        ds180.y[flip] = 0.0
        assert not label_monotonicity_ok({90: ds90, 180: ds180})
