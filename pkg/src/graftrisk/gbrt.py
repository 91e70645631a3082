"""Gradient-boosted regression trees with native missing-value routing.

Squared-error boosting on 0/1 endpoint labels: the base score is the label
mean and every round fits an exact-greedy CART regression tree to the
current residuals. Feature values are quantized to float32 at the model
boundary; split thresholds and all residual arithmetic stay in float64.

Training is deterministic: a fixed seed and input order produce a
bit-identical artifact for any worker count (split search parallelizes
over feature ranges into per-feature result slots; the reduction order is
fixed).
"""
from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _boost
from ._boost import MIN_GAIN
from .cohort import LabeledDataset
from .errors import ArtifactError, EmptyDatasetError, ModelContractError
from .features import FeatureSchema

FORMAT_VERSION = "1.0"


@dataclass(frozen=True)
class Hyperparams:
    n_trees: int = 300
    learning_rate: float = 0.05
    max_depth: int = 4
    min_samples_leaf: int = 20
    row_subsample: float = 1.0
    feature_subsample: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 0:
            raise ValueError("n_trees must be >= 0")
        if not (0.0 < self.learning_rate <= 1.0):
            raise ValueError("learning_rate must be in (0, 1]")
        if self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if not (0.0 < self.row_subsample <= 1.0):
            raise ValueError("row_subsample must be in (0, 1]")
        if not (0.0 < self.feature_subsample <= 1.0):
            raise ValueError("feature_subsample must be in (0, 1]")
        if not (0 <= self.seed < 2 ** 64):
            raise ValueError("seed must be a 64-bit unsigned integer")

    def as_dict(self) -> dict:
        return {
            "n_trees": self.n_trees,
            "learning_rate": self.learning_rate,
            "max_depth": self.max_depth,
            "min_samples_leaf": self.min_samples_leaf,
            "row_subsample": self.row_subsample,
            "feature_subsample": self.feature_subsample,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class SplitCandidate:
    feature_index: int
    threshold: float
    missing_goes_left: bool
    gain: float


@dataclass
class Tree:
    """Flat node arrays; index 0 is the root, feature == -1 marks leaves.

    `value` holds the mean residual of the node's training samples for
    every node (leaves predict it; internal means feed local attribution).
    """

    feature: np.ndarray
    threshold: np.ndarray
    missing_left: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray
    gain: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def to_nested(self) -> dict:
        def build(i: int) -> dict:
            if self.feature[i] < 0:
                return {"value": float(self.value[i]), "n": int(self.n_samples[i])}
            return {
                "feature": int(self.feature[i]),
                "threshold": float(self.threshold[i]),
                "missing_goes_left": bool(self.missing_left[i]),
                "gain": float(self.gain[i]),
                "mean": float(self.value[i]),
                "n": int(self.n_samples[i]),
                "left": build(int(self.left[i])),
                "right": build(int(self.right[i])),
            }

        return build(0)

    @classmethod
    def from_nested(cls, obj: dict) -> "Tree":
        feature, threshold, missing_left = [], [], []
        left, right, value, n_samples, gain = [], [], [], [], []

        def alloc() -> int:
            feature.append(-1)
            threshold.append(0.0)
            missing_left.append(False)
            left.append(-1)
            right.append(-1)
            value.append(0.0)
            n_samples.append(0)
            gain.append(0.0)
            return len(feature) - 1

        def build(node: dict, i: int) -> None:
            n_samples[i] = int(node["n"])
            if "feature" in node:
                feature[i] = int(node["feature"])
                threshold[i] = float(node["threshold"])
                missing_left[i] = bool(node["missing_goes_left"])
                gain[i] = float(node["gain"])
                value[i] = float(node["mean"])
                li = alloc()
                ri = alloc()
                left[i] = li
                right[i] = ri
                build(node["left"], li)
                build(node["right"], ri)
            else:
                value[i] = float(node["value"])

        build(obj, alloc())
        return cls(
            feature=np.asarray(feature, dtype=np.int32),
            threshold=np.asarray(threshold, dtype=np.float64),
            missing_left=np.asarray(missing_left, dtype=np.bool_),
            left=np.asarray(left, dtype=np.int32),
            right=np.asarray(right, dtype=np.int32),
            value=np.asarray(value, dtype=np.float64),
            n_samples=np.asarray(n_samples, dtype=np.int64),
            gain=np.asarray(gain, dtype=np.float64),
        )


class Model:
    """Fitted ensemble: prediction = base_score + lr * sum of tree outputs."""

    def __init__(self, base_score: float, learning_rate: float, trees: list[Tree],
                 schema: FeatureSchema, meta: dict):
        self.base_score = base_score
        self.learning_rate = learning_rate
        self.trees = trees
        self.schema = schema
        self.meta = meta
        self._flat = None

    def _flattened(self):
        if self._flat is None:
            feat, thr, miss, left, right, value = [], [], [], [], [], []
            tree_off = []
            for tree in self.trees:
                off = len(feat)
                tree_off.append(off)
                feat.extend(tree.feature.tolist())
                thr.extend(tree.threshold.tolist())
                miss.extend(tree.missing_left.tolist())
                left.extend((tree.left + np.where(tree.left >= 0, off, 0)).tolist())
                right.extend((tree.right + np.where(tree.right >= 0, off, 0)).tolist())
                value.extend(tree.value.tolist())
            tree_off.append(len(feat))
            self._flat = (
                np.asarray(feat, dtype=np.int32),
                np.asarray(thr, dtype=np.float64),
                np.asarray(miss, dtype=np.bool_),
                np.asarray(left, dtype=np.int32),
                np.asarray(right, dtype=np.int32),
                np.asarray(value, dtype=np.float64),
                np.asarray(tree_off, dtype=np.int64),
            )
        return self._flat

    def _as_row(self, x: Sequence[Optional[float]]) -> np.ndarray:
        if len(x) != len(self.schema):
            raise ModelContractError(
                f"feature vector length {len(x)} != schema length {len(self.schema)}"
            )
        row = np.empty(len(x), dtype=np.float32)
        for i, v in enumerate(x):
            row[i] = np.nan if v is None else np.float32(v)
        return row

    def predict(self, x: Sequence[Optional[float]]) -> float:
        """Raw regression score for one feature vector (may leave [0, 1])."""
        row = self._as_row(x)
        score = self.base_score
        for tree in self.trees:
            node = 0
            while tree.feature[node] >= 0:
                v = row[tree.feature[node]]
                if np.isnan(v):
                    node = tree.left[node] if tree.missing_left[node] else tree.right[node]
                elif float(v) <= tree.threshold[node]:
                    node = tree.left[node]
                else:
                    node = tree.right[node]
            score += self.learning_rate * tree.value[node]
        return float(score)

    def predict_display(self, x: Sequence[Optional[float]]) -> float:
        """Score clamped to [0, 1] for display; ranking uses the raw score."""
        return min(1.0, max(0.0, self.predict(x)))

    def predict_matrix(self, X: np.ndarray) -> np.ndarray:
        X32 = np.ascontiguousarray(X, dtype=np.float32)
        if X32.ndim != 2 or X32.shape[1] != len(self.schema):
            raise ModelContractError(
                f"matrix shape {X.shape} incompatible with schema length {len(self.schema)}"
            )
        out = np.empty(X32.shape[0], dtype=np.float64)
        if not self.trees:
            out.fill(self.base_score)
            return out
        feat, thr, miss, left, right, value, tree_off = self._flattened()
        _boost.predict_forest(X32, feat, thr, miss, left, right, value, tree_off,
                              self.base_score, self.learning_rate, out)
        return out

    def save(self) -> bytes:
        doc = {
            "format_version": FORMAT_VERSION,
            "meta": self.meta,
            "base_score": self.base_score,
            "learning_rate": self.learning_rate,
            "schema": json.loads(self.schema.to_json()),
            "trees": [t.to_nested() for t in self.trees],
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()


def load(payload: bytes) -> Model:
    try:
        doc = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"corrupt model artifact: {exc}") from None
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise ArtifactError("corrupt model artifact: missing format_version")
    version = str(doc["format_version"])
    if version.split(".")[0] != FORMAT_VERSION.split(".")[0]:
        raise ArtifactError(f"unsupported model format_version {version!r}")
    try:
        schema = FeatureSchema.from_json(json.dumps(doc["schema"]))
        trees = [Tree.from_nested(t) for t in doc["trees"]]
        model = Model(
            base_score=float(doc["base_score"]),
            learning_rate=float(doc["learning_rate"]),
            trees=trees,
            schema=schema,
            meta=dict(doc["meta"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ArtifactError(f"corrupt model artifact: {exc}") from None
    return model


def save(model: Model) -> bytes:
    return model.save()


def dataset_fingerprint(X: np.ndarray, y: np.ndarray, schema: FeatureSchema) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(X, dtype=np.float32).tobytes())
    h.update(np.ascontiguousarray(y, dtype=np.float64).tobytes())
    h.update(schema.to_json().encode())
    return h.hexdigest()


def best_split(
    samples: list[tuple[Sequence[Optional[float]], float]],
    feature_index: int,
    min_samples_leaf: int = 1,
) -> Optional[SplitCandidate]:
    """Best SSE-reduction split of `samples` on one feature, or None.

    Candidates are midpoints of consecutive distinct present values
    (quantized to float32 like the training matrix); missing samples go to
    whichever side gains more (ties keep them right). Positive gain means
    > MIN_GAIN, which filters float dust on constant residuals. This is
    the reference for the training kernel's per-feature scan.
    """
    ntot = len(samples)
    if ntot < 2 * min_samples_leaf:
        return None
    stot = 0.0
    present: list[tuple[np.float32, int, float]] = []
    n_miss = 0
    s_miss = 0.0
    for order, (vec, r) in enumerate(samples):
        r = float(r)
        stot += r
        v = vec[feature_index]
        if v is None or (isinstance(v, float) and np.isnan(v)):
            n_miss += 1
            s_miss += r
        else:
            present.append((np.float32(v), order, r))
    if len(present) < 2:
        return None
    present.sort(key=lambda t: (t[0], t[1]))
    inv = _reciprocal_table(ntot)
    base = stot * stot * inv[ntot]
    best_g = 0.0
    best_t = 0.0
    best_m = False
    found = False
    n_l = 0
    s_l = 0.0
    prev_v = present[0][0]
    for i, (v, _, r) in enumerate(present):
        if i > 0 and v != prev_v:
            thr = (float(prev_v) + float(v)) * 0.5
            if thr >= float(v):
                thr = float(prev_v)
            nl, nr = n_l, ntot - n_l
            if nl >= min_samples_leaf and nr >= min_samples_leaf:
                sl = s_l
                sr = stot - sl
                g = sl * sl * inv[nl] + sr * sr * inv[nr] - base
                if g > best_g:
                    best_g, best_t, best_m, found = g, thr, False, True
            if n_miss > 0:
                nl2, nr2 = n_l + n_miss, ntot - n_l - n_miss
                if nl2 >= min_samples_leaf and nr2 >= min_samples_leaf:
                    sl2 = s_l + s_miss
                    sr2 = stot - sl2
                    g2 = sl2 * sl2 * inv[nl2] + sr2 * sr2 * inv[nr2] - base
                    if g2 > best_g:
                        best_g, best_t, best_m, found = g2, thr, True, True
        n_l += 1
        s_l += r
        prev_v = v
    if not found or best_g <= MIN_GAIN:
        return None
    return SplitCandidate(feature_index, best_t, best_m, best_g)


def _reciprocal_table(n: int) -> np.ndarray:
    """inv[k] = fl(1/k); split gains are computed as sum^2 * inv[count] in
    both the training kernel and the best_split reference, keeping the two
    bit-identical while the hot loop stays division-free."""
    inv = np.empty(n + 1, dtype=np.float64)
    inv[0] = 0.0
    inv[1:] = 1.0 / np.arange(1, n + 1, dtype=np.float64)
    return inv


def _chunk_ranges(n: int, n_jobs: int) -> list[tuple[int, int]]:
    n_jobs = max(1, min(n_jobs, n)) if n else 1
    step = -(-n // n_jobs)
    return [(i, min(i + step, n)) for i in range(0, n, step)]


@dataclass
class Presort:
    """Per-feature value-sorted present-row lists (concatenated)."""

    rows: np.ndarray      # int32
    vals: np.ndarray      # float32
    offsets: np.ndarray   # int64, len F+1

    @classmethod
    def build(cls, X32: np.ndarray) -> "Presort":
        F = X32.shape[1]
        rows_parts, vals_parts = [], []
        offsets = np.zeros(F + 1, dtype=np.int64)
        for f in range(F):
            col = X32[:, f]
            pres = np.flatnonzero(~np.isnan(col)).astype(np.int32)
            order = np.argsort(col[pres], kind="stable")
            rows_parts.append(pres[order])
            vals_parts.append(col[pres][order])
            offsets[f + 1] = offsets[f] + len(pres)
        rows = np.concatenate(rows_parts) if rows_parts else np.empty(0, dtype=np.int32)
        vals = np.concatenate(vals_parts) if vals_parts else np.empty(0, dtype=np.float32)
        return cls(rows, vals, offsets)

    def filter_rows(self, row_subset: np.ndarray, n_full: int) -> "Presort":
        """Presort for the submatrix X[row_subset]; identical to rebuilding
        from scratch because filtering preserves the stable value order."""
        remap = np.full(n_full, -1, dtype=np.int32)
        remap[row_subset] = np.arange(len(row_subset), dtype=np.int32)
        mapped = remap[self.rows]
        keep = mapped >= 0
        csum = np.concatenate(([0], np.cumsum(keep, dtype=np.int64)))
        return Presort(mapped[keep], self.vals[keep], csum[self.offsets])


class _TreeBuilder:
    """Grows one tree level by level over the global presorted lists."""

    def __init__(self, X_fortran, resid, rows, feats, hp, pool, chunks, has_missing, inv):
        self.X = X_fortran
        self.resid = resid
        self.rows = rows
        self.feats = feats
        self.hp = hp
        self.pool = pool
        self.chunks = chunks
        self.has_missing = has_missing
        self.inv = inv
        self.records: list[dict] = []

    def _run(self, fn, *args):
        if self.pool is None:
            fn(*args, 0, len(self.feats))
            return
        futures = [self.pool.submit(fn, *args, lo, hi) for lo, hi in self.chunks]
        for f in futures:
            f.result()

    def _new_record(self, n: int, s: float) -> int:
        self.records.append({
            "feature": -1, "threshold": 0.0, "missing_left": False,
            "left": -1, "right": -1, "value": s / n if n else 0.0,
            "n": n, "gain": 0.0,
        })
        return len(self.records) - 1

    def build(self, presort: Presort, node_assign, tree_pred):
        hp = self.hp
        F = self.X.shape[1]
        n_member = len(self.rows)
        root_sum = float(self.resid[self.rows].sum())
        root = self._new_record(n_member, root_sum)

        slots = [root]
        node_rows = self.rows
        row_off = np.asarray([0, n_member], dtype=np.int64)
        node_n = np.asarray([n_member], dtype=np.int64)
        node_s = np.asarray([root_sum], dtype=np.float64)

        for depth in range(hp.max_depth + 1):
            L = len(slots)
            if L == 0:
                break
            if depth == hp.max_depth:
                for s_i, rid in enumerate(slots):
                    self._finalize_leaf(rid, node_rows, row_off, s_i, node_assign, tree_pred)
                break
            splittable = np.asarray([self.records[rid]["n"] for rid in slots]) >= 2 * hp.min_samples_leaf
            for s_i, rid in enumerate(slots):
                if not splittable[s_i]:
                    self._finalize_leaf(rid, node_rows, row_off, s_i, node_assign, tree_pred)
            if not splittable.any():
                break
            all_root = depth == 0 and n_member == len(node_assign) and bool(splittable[0])
            out_gain = np.zeros(L * F, dtype=np.float64)
            out_thr = np.zeros(L * F, dtype=np.float64)
            out_miss = np.zeros(L * F, dtype=np.bool_)
            self._run(_boost.scan_candidates, presort.rows, presort.vals,
                      presort.offsets, L, F, node_assign, all_root, self.resid,
                      node_n, node_s, self.has_missing, hp.min_samples_leaf,
                      self.inv, self.feats, out_gain, out_thr, out_miss)
            gains = out_gain.reshape(L, F)
            best_f = gains.argmax(axis=1)
            best_gain = gains[np.arange(L), best_f]
            split_flag = (best_gain > MIN_GAIN) & splittable

            if not split_flag.any():
                for s_i, rid in enumerate(slots):
                    if splittable[s_i]:
                        self._finalize_leaf(rid, node_rows, row_off, s_i, node_assign, tree_pred)
                break

            split_f = best_f.astype(np.int64)
            split_thr = out_thr.reshape(L, F)[np.arange(L), best_f]
            split_miss = out_miss.reshape(L, F)[np.arange(L), best_f]
            child_base = np.full(L, -1, dtype=np.int64)
            n_children = 0
            for s_i, rid in enumerate(slots):
                if split_flag[s_i]:
                    rec = self.records[rid]
                    rec["feature"] = int(split_f[s_i])
                    rec["threshold"] = float(split_thr[s_i])
                    rec["missing_left"] = bool(split_miss[s_i])
                    rec["gain"] = float(best_gain[s_i])
                    child_base[s_i] = n_children
                    n_children += 2
                elif splittable[s_i]:
                    self._finalize_leaf(rid, node_rows, row_off, s_i, node_assign, tree_pred)

            sel = np.flatnonzero(split_flag)
            n_routed = int((row_off[sel + 1] - row_off[sel]).sum())
            new_rows = np.empty(n_routed, dtype=np.int32)
            new_row_off = np.empty(n_children + 1, dtype=np.int64)
            new_row_off[n_children] = n_routed
            child_n = np.zeros(n_children, dtype=np.int64)
            child_s = np.zeros(n_children, dtype=np.float64)
            _boost.route_split_nodes(node_rows, row_off, L, self.X, split_flag,
                                     split_f, split_thr, split_miss, child_base,
                                     node_assign, self.resid, new_rows, new_row_off,
                                     child_n, child_s)
            next_slots: list[int] = []
            for s_i, rid in enumerate(slots):
                if split_flag[s_i]:
                    lbase = int(child_base[s_i])
                    li = self._new_record(int(child_n[lbase]), float(child_s[lbase]))
                    ri = self._new_record(int(child_n[lbase + 1]), float(child_s[lbase + 1]))
                    self.records[rid]["left"] = li
                    self.records[rid]["right"] = ri
                    next_slots.extend([li, ri])

            slots = next_slots
            node_rows, row_off = new_rows, new_row_off
            node_n, node_s = child_n, child_s

        return self._to_tree()

    def _finalize_leaf(self, rid, node_rows, row_off, slot, node_assign, tree_pred):
        rows = node_rows[row_off[slot]:row_off[slot + 1]]
        tree_pred[rows] = self.records[rid]["value"]
        node_assign[rows] = -1

    def _to_tree(self) -> Tree:
        recs = self.records
        return Tree(
            feature=np.asarray([r["feature"] for r in recs], dtype=np.int32),
            threshold=np.asarray([r["threshold"] for r in recs], dtype=np.float64),
            missing_left=np.asarray([r["missing_left"] for r in recs], dtype=np.bool_),
            left=np.asarray([r["left"] for r in recs], dtype=np.int32),
            right=np.asarray([r["right"] for r in recs], dtype=np.int32),
            value=np.asarray([r["value"] for r in recs], dtype=np.float64),
            n_samples=np.asarray([r["n"] for r in recs], dtype=np.int64),
            gain=np.asarray([r["gain"] for r in recs], dtype=np.float64),
        )


def fit(dataset: LabeledDataset, hp: Hyperparams, n_jobs: int = 1,
        presort: Optional[Presort] = None) -> Model:
    """Train the boosted ensemble. Bit-identical output for any n_jobs."""
    X = dataset.X
    y = np.asarray(dataset.y, dtype=np.float64)
    n, F = X.shape
    if n == 0:
        raise EmptyDatasetError("cannot fit on an empty dataset")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("labels must be 0/1")

    X32 = np.asfortranarray(X, dtype=np.float32)
    base = float(y.mean())
    resid = y - base
    if presort is None:
        presort = Presort.build(X32)
    elif len(presort.offsets) != F + 1:
        raise ValueError("presort does not match the dataset's feature count")

    all_feats = np.arange(F, dtype=np.int64)
    has_missing = (np.diff(presort.offsets) < n)
    inv = _reciprocal_table(n)
    pool = ThreadPoolExecutor(max_workers=n_jobs) if n_jobs > 1 else None
    seeds = np.random.SeedSequence(hp.seed).spawn(hp.n_trees)
    trees: list[Tree] = []
    sse_per_round: list[float] = []
    prev_sse = float(np.dot(resid, resid))
    full_rows = np.arange(n, dtype=np.int32)

    try:
        for k in range(hp.n_trees):
            rng = np.random.default_rng(seeds[k])
            if hp.row_subsample < 1.0:
                m = max(1, int(n * hp.row_subsample))
                rows = np.sort(rng.permutation(n)[:m]).astype(np.int32)
            else:
                rows = full_rows
            if hp.feature_subsample < 1.0:
                mf = max(1, int(F * hp.feature_subsample))
                feats = np.sort(rng.permutation(F)[:mf]).astype(np.int64)
            else:
                feats = all_feats
            chunks = _chunk_ranges(len(feats), n_jobs * 4)

            node_assign = np.full(n, -1, dtype=np.int16)
            node_assign[rows] = 0
            tree_pred = np.zeros(n, dtype=np.float64)
            builder = _TreeBuilder(X32, resid, rows, feats, hp, pool, chunks,
                                   has_missing, inv)
            tree = builder.build(presort, node_assign, tree_pred)
            trees.append(tree)

            if len(rows) < n:
                others = np.setdiff1d(full_rows, rows, assume_unique=True).astype(np.int64)
                out = np.empty(len(others), dtype=np.float64)
                _boost.tree_leaf_values(X32, others, tree.feature,
                                        tree.threshold, tree.missing_left, tree.left,
                                        tree.right, tree.value, out)
                tree_pred[others] = out
            resid -= hp.learning_rate * tree_pred
            sse = float(np.dot(resid, resid))
            if hp.row_subsample >= 1.0:
                # Guaranteed analytically; slack covers float rounding only.
                if sse > prev_sse * (1.0 + 1e-12) + 1e-12:
                    raise AssertionError(
                        f"training SSE increased in round {k}: {prev_sse} -> {sse}"
                    )
            sse_per_round.append(sse)
            prev_sse = sse
    finally:
        if pool is not None:
            pool.shutdown(wait=True)

    meta = {
        "format": "graftrisk-gbrt",
        "hyperparams": hp.as_dict(),
        "seed": hp.seed,
        "n_rows": int(n),
        "n_features": int(F),
        "dataset_fingerprint": dataset_fingerprint(X, y, dataset.schema),
        "sse_per_round": sse_per_round,
        "window_days": dataset.window_days,
    }
    return Model(base, hp.learning_rate, trees, dataset.schema, meta)
