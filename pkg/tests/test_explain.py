import numpy as np
import pytest

from graftrisk.errors import ModelContractError
from graftrisk.explain import attribution_payload, global_importance, local_attribution
from graftrisk.gbrt import Hyperparams, fit

from conftest import make_dataset


def _random_model(seed, n=200, f=6, trees=10):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, f))
    X[rng.random(X.shape) < 0.3] = np.nan
    y = ((np.nan_to_num(X[:, 0]) + 0.6 * np.nan_to_num(X[:, 1])
          + rng.normal(0, 0.8, n)) > 0.2).astype(float)
    ds = make_dataset(X, y)
    return fit(ds, Hyperparams(n_trees=trees, seed=seed, min_samples_leaf=4,
                               learning_rate=0.3)), X


class TestGlobalImportance:
    def test_constant_model_empty(self):
        model = fit(make_dataset([[1.0], [2.0]], [1, 1]),
                    Hyperparams(n_trees=3, seed=0, min_samples_leaf=1))
        assert global_importance(model).ranking == []

    def test_single_stump_full_share(self):
        ds = make_dataset([[0.0, 5.0], [1.0, 5.0], [2.0, 5.0], [3.0, 5.0]], [0, 0, 1, 1])
        model = fit(ds, Hyperparams(n_trees=1, learning_rate=1.0, max_depth=1,
                                    min_samples_leaf=1, seed=0))
        assert global_importance(model).ranking == [("f000", 1.0)]

    def test_shares_from_recorded_gains(self):
        model, _ = _random_model(3)
        totals = {}
        for tree in model.trees:
            for i in range(tree.n_nodes):
                if tree.feature[i] >= 0:
                    name = model.schema.names[int(tree.feature[i])]
                    totals[name] = totals.get(name, 0.0) + float(tree.gain[i])
        total = sum(totals.values())
        expected = {k: v / total for k, v in totals.items() if v > 0}
        got = dict(global_importance(model).ranking)
        assert set(got) == set(expected)
        for k in got:
            assert got[k] == pytest.approx(expected[k], rel=1e-12)

    def test_shares_sum_to_one_and_sorted(self):
        model, _ = _random_model(5)
        ranking = global_importance(model).ranking
        shares = [s for _, s in ranking]
        assert sum(shares) == pytest.approx(1.0, abs=1e-9)
        assert shares == sorted(shares, reverse=True)
        assert all(s > 0 for s in shares)


class TestLocalAttribution:
    def test_constant_model(self):
        model = fit(make_dataset([[1.0], [2.0]], [1, 1]),
                    Hyperparams(n_trees=2, seed=0, min_samples_leaf=1))
        la = local_attribution(model, [1.5])
        assert la.bias == model.base_score == la.prediction
        assert la.contributions == {}

    def test_single_stump_hand_trace(self):
        ds = make_dataset([[0.0], [1.0], [2.0], [3.0]], [0, 0, 1, 1])
        model = fit(ds, Hyperparams(n_trees=1, learning_rate=1.0, max_depth=1,
                                    min_samples_leaf=1, seed=0))
        tree = model.trees[0]
        la = local_attribution(model, [3.0])  # routed right
        expected = model.learning_rate * (tree.value[int(tree.right[0])] - tree.value[0])
        assert la.contributions["f000"] == pytest.approx(expected, rel=1e-12)
        assert la.bias + sum(la.contributions.values()) == pytest.approx(
            model.predict([3.0]), abs=1e-12)

    def test_additivity_random(self):
        rng = np.random.default_rng(0)
        for seed in range(5):
            model, X = _random_model(seed)
            for row in X[:20]:
                x = [None if np.isnan(v) else float(v) for v in row]
                la = local_attribution(model, x)
                total = la.bias + sum(la.contributions.values())
                pred = model.predict(x)
                assert abs(total - pred) <= 1e-9 * max(1.0, abs(pred))
                assert la.prediction == pred

    def test_unused_feature_zero_contribution(self):
        ds = make_dataset([[0.0, 7.0], [1.0, 7.0], [2.0, 7.0], [3.0, 7.0]], [0, 0, 1, 1])
        model = fit(ds, Hyperparams(n_trees=2, learning_rate=0.5, max_depth=2,
                                    min_samples_leaf=1, seed=0))
        for probe in (0.0, 100.0, -3.5):
            la = local_attribution(model, [2.5, probe])
            assert "f001" not in la.contributions
            assert model.predict([2.5, probe]) == model.predict([2.5, 0.0])

    def test_schema_mismatch(self):
        model, _ = _random_model(1)
        with pytest.raises(ModelContractError):
            local_attribution(model, [1.0])

    def test_top_k_ordering(self):
        model, X = _random_model(2)
        la = local_attribution(model, [None if np.isnan(v) else float(v) for v in X[0]])
        top = la.top(3)
        mags = [abs(c) for _, c in top]
        assert mags == sorted(mags, reverse=True)


class TestPayload:
    def test_payload_shape(self):
        model, X = _random_model(4)
        x = [None if np.isnan(v) else float(v) for v in X[1]]
        payload = attribution_payload(model, x, k=5)
        assert set(payload) == {"bias", "prediction", "contributions", "global"}
        assert len(payload["contributions"]) <= 5
        for item in payload["contributions"]:
            assert set(item) == {"feature", "value_at_t", "contribution"}
        for item in payload["global"]:
            assert set(item) == {"feature", "share"}
