"""Model explanations: global gain importance and additive local attributions.

Local attributions are path contributions: walking a tree along x's route,
each split moves the running node mean, and that delta (scaled by the
learning rate) is credited to the split feature. Deltas telescope to the
leaf value, so bias + sum(contributions) reproduces the prediction
exactly. Under row subsampling each tree's root mean is not exactly zero;
those root means are folded into the reported bias so additivity holds for
every model (with full-sample training the bias equals the base score up
to float dust).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ModelContractError
from .gbrt import Model


@dataclass
class GlobalImportance:
    """Descending (feature, gain share) ranking; shares sum to 1 when any
    tree carries positive gain. Zero-gain features are omitted."""

    ranking: list[tuple[str, float]]

    def top(self, k: int = 10) -> list[tuple[str, float]]:
        return self.ranking[:k]

    def as_payload(self, k: Optional[int] = None) -> list[dict]:
        items = self.ranking if k is None else self.ranking[:k]
        return [{"feature": f, "share": s} for f, s in items]


@dataclass
class LocalAttribution:
    bias: float
    prediction: float
    contributions: dict[str, float]

    def top(self, k: int = 10) -> list[tuple[str, float]]:
        items = [(f, c) for f, c in self.contributions.items() if c != 0.0]
        items.sort(key=lambda fc: (-abs(fc[1]), fc[0]))
        return items[:k]


def global_importance(model: Model) -> GlobalImportance:
    """Per-feature split gain summed over all trees, normalized to shares."""
    totals = np.zeros(len(model.schema), dtype=np.float64)
    for tree in model.trees:
        internal = tree.feature >= 0
        np.add.at(totals, tree.feature[internal], tree.gain[internal])
    total = totals.sum()
    if total <= 0.0:
        return GlobalImportance([])
    order = sorted(range(len(totals)), key=lambda i: (-totals[i], i))
    ranking = [(model.schema.names[i], float(totals[i] / total))
               for i in order if totals[i] > 0.0]
    return GlobalImportance(ranking)


def local_attribution(model: Model, x: Sequence[Optional[float]]) -> LocalAttribution:
    """Additive decomposition of predict(model, x) over routed split features."""
    if len(x) != len(model.schema):
        raise ModelContractError(
            f"feature vector length {len(x)} != schema length {len(model.schema)}"
        )
    row = np.empty(len(x), dtype=np.float32)
    for i, v in enumerate(x):
        row[i] = np.nan if v is None else np.float32(v)

    lr = model.learning_rate
    bias = model.base_score
    contrib = np.zeros(len(model.schema), dtype=np.float64)
    prediction = model.base_score
    for tree in model.trees:
        bias += lr * tree.value[0]
        node = 0
        while tree.feature[node] >= 0:
            f = int(tree.feature[node])
            v = row[f]
            if np.isnan(v):
                child = tree.left[node] if tree.missing_left[node] else tree.right[node]
            elif float(v) <= tree.threshold[node]:
                child = tree.left[node]
            else:
                child = tree.right[node]
            contrib[f] += lr * (tree.value[child] - tree.value[node])
            node = child
        prediction += lr * tree.value[node]
    contributions = {
        model.schema.names[i]: float(contrib[i])
        for i in range(len(contrib)) if contrib[i] != 0.0
    }
    return LocalAttribution(bias=float(bias), prediction=float(prediction),
                            contributions=contributions)


def attribution_payload(model: Model, x: Sequence[Optional[float]], k: int = 10) -> dict:
    """JSON payload consumed by the service and dashboard."""
    la = local_attribution(model, x)
    gi = global_importance(model)
    contribs = []
    for f, c in la.top(k):
        idx = model.schema.index_of(f)
        contribs.append({
            "feature": f,
            "value_at_t": x[idx] if x[idx] is not None else None,
            "contribution": c,
        })
    return {
        "bias": la.bias,
        "prediction": la.prediction,
        "contributions": contribs,
        "global": gi.as_payload(k),
    }
