"""Numba kernels for exact-greedy boosted-tree induction.

Per fit, every feature's non-missing rows are presorted by value once.
Trees grow level by level; the split scan walks each feature's global
sorted list once per level, keeping per-node running state (row -> node
lookup) instead of repartitioning lists. Candidates are evaluated in
descending value order from suffix sums, so left-side aggregates come from
node totals by complement and no separate present-sum pass is needed; only
features that contain missing values take a quick forward pass (for the
present total that the missing-goes-right family requires). Gains use a
precomputed reciprocal table (sum^2 * inv[n]) so the hot loop carries no
divisions; the reference best_split uses the same arithmetic.

Determinism contract: kernels write per-(node, feature) result slots and
accumulate float sums in a fixed order, so the outcome is bit-identical no
matter how feature ranges are chunked across worker threads. The suffix
formulation computes left sums as (total - suffix); this matches prefix
accumulation up to float ulps, which only matters for mathematically tied
candidates.
"""
from __future__ import annotations

import numpy as np
from numba import njit

# A split must beat this gain to be accepted; guards against float dust
# masquerading as signal when all residuals are equal.
MIN_GAIN = 1e-12


@njit(nogil=True, cache=True)
def scan_candidates(sorted_rows, sorted_vals, offsets, n_slots, n_features,
                    node_assign, all_root, resid, node_n, node_s, has_missing,
                    min_leaf, inv, feats, out_gain, out_thr, out_miss, lo, hi):
    """Best SSE-reduction split per (node, feature).

    Candidates are midpoints of consecutive distinct present values within
    the node; the missing bucket goes to whichever side gains more (ties
    keep it right). Equal-gain candidates keep the lowest threshold: the
    scan runs in descending value order and replaces on >=, so the last
    (lowest-threshold) candidate of equal gain wins; at one threshold the
    missing-left family is evaluated first and missing-right overwrites on
    equality.
    """
    n_r = np.zeros(n_slots, dtype=np.int64)
    s_r = np.zeros(n_slots, dtype=np.float64)
    psum = np.zeros(n_slots, dtype=np.float64)
    pcnt = np.zeros(n_slots, dtype=np.int64)
    prev_v = np.zeros(n_slots, dtype=np.float32)
    best_g = np.zeros(n_slots, dtype=np.float64)
    best_t = np.zeros(n_slots, dtype=np.float64)
    best_m = np.zeros(n_slots, dtype=np.uint8)
    base = np.zeros(n_slots, dtype=np.float64)
    for s in range(n_slots):
        if node_n[s] > 0:
            base[s] = node_s[s] * node_s[s] * inv[node_n[s]]

    for fi in range(lo, hi):
        f = feats[fi]
        a = offsets[f]
        b = offsets[f + 1]
        if b - a < 2:
            continue
        fm = has_missing[f]
        for s in range(n_slots):
            n_r[s] = 0
            s_r[s] = 0.0
            psum[s] = 0.0
            pcnt[s] = 0
            best_g[s] = 0.0
            best_t[s] = 0.0
            best_m[s] = 0
        if fm:
            for i in range(a, b):
                row = sorted_rows[i]
                slot = 0 if all_root else np.int64(node_assign[row])
                if slot >= 0:
                    psum[slot] += resid[row]
                    pcnt[slot] += 1
        for i in range(b - 1, a - 1, -1):
            row = sorted_rows[i]
            slot = 0 if all_root else np.int64(node_assign[row])
            if slot < 0:
                continue
            v = sorted_vals[i]
            if n_r[slot] > 0 and v != prev_v[slot]:
                ntot = node_n[slot]
                stot = node_s[slot]
                nr = n_r[slot]
                sr = s_r[slot]
                # boundary between v (lower) and prev_v (upper); a float
                # midpoint can round up to the upper value, in which case
                # fall back so `x <= thr` keeps the lower group exact
                thr = (np.float64(v) + np.float64(prev_v[slot])) * 0.5
                if thr >= np.float64(prev_v[slot]):
                    thr = np.float64(v)
                if fm and ntot - pcnt[slot] > 0:
                    # missing-left: right side is the present suffix
                    nl2 = ntot - nr
                    if nl2 >= min_leaf and nr >= min_leaf:
                        sl2 = stot - sr
                        g2 = sl2 * sl2 * inv[nl2] + sr * sr * inv[nr] - base[slot]
                        if g2 > 0.0 and g2 >= best_g[slot]:
                            best_g[slot] = g2
                            best_t[slot] = thr
                            best_m[slot] = 1
                # missing-right: left side is the present prefix
                if fm:
                    npres = pcnt[slot]
                    spres = psum[slot]
                else:
                    npres = ntot
                    spres = stot
                nl = npres - nr
                nr1 = ntot - nl
                if nl >= min_leaf and nr1 >= min_leaf:
                    sl = spres - sr
                    sr1 = stot - sl
                    g = sl * sl * inv[nl] + sr1 * sr1 * inv[nr1] - base[slot]
                    if g > 0.0 and g >= best_g[slot]:
                        best_g[slot] = g
                        best_t[slot] = thr
                        best_m[slot] = 0
            n_r[slot] += 1
            s_r[slot] += resid[row]
            prev_v[slot] = v
        for s in range(n_slots):
            if best_g[s] > 0.0:
                k = s * n_features + f
                out_gain[k] = best_g[s]
                out_thr[k] = best_t[s]
                out_miss[k] = best_m[s] == 1


@njit(nogil=True, cache=True)
def route_split_nodes(node_rows, row_off, n_slots, X, split_flag, split_f, split_thr,
                      split_miss, child_base, node_assign, resid,
                      new_rows, new_row_off, child_n, child_s):
    """Route each split node's rows to its children (row order preserved).

    X is the Fortran-ordered training matrix: routing reads one feature
    column per node.
    """
    wpos = 0
    for node in range(n_slots):
        if not split_flag[node]:
            continue
        f = split_f[node]
        thr = split_thr[node]
        ml = split_miss[node]
        a = row_off[node]
        b = row_off[node + 1]
        nl = 0
        for i in range(a, b):
            v = X[node_rows[i], f]
            if np.isnan(v):
                if ml:
                    nl += 1
            elif np.float64(v) <= thr:
                nl += 1
        lbase = child_base[node]
        lcur = wpos
        rcur = wpos + nl
        new_row_off[lbase] = lcur
        new_row_off[lbase + 1] = rcur
        sl = 0.0
        sr = 0.0
        for i in range(a, b):
            row = node_rows[i]
            v = X[row, f]
            if np.isnan(v):
                goleft = ml
            else:
                goleft = np.float64(v) <= thr
            if goleft:
                new_rows[lcur] = row
                lcur += 1
                node_assign[row] = np.int16(lbase)
                sl += resid[row]
            else:
                new_rows[rcur] = row
                rcur += 1
                node_assign[row] = np.int16(lbase + 1)
                sr += resid[row]
        child_n[lbase] = nl
        child_n[lbase + 1] = (b - a) - nl
        child_s[lbase] = sl
        child_s[lbase + 1] = sr
        wpos += b - a


@njit(nogil=True, cache=True)
def predict_forest(X, feat, thr, miss_left, left, right, value, tree_off, base, lr, out):
    """Additive forest prediction: base + lr * sum of routed leaf values."""
    n = X.shape[0]
    for i in range(n):
        s = base
        for t in range(tree_off.shape[0] - 1):
            node = tree_off[t]
            while feat[node] >= 0:
                v = X[i, feat[node]]
                if np.isnan(v):
                    node = left[node] if miss_left[node] else right[node]
                elif np.float64(v) <= thr[node]:
                    node = left[node]
                else:
                    node = right[node]
            s += lr * value[node]
        out[i] = s


@njit(nogil=True, cache=True)
def tree_leaf_values(X, rows, feat, thr, miss_left, left, right, value, out):
    """Leaf value of one tree for the given rows (used for out-of-sample
    residual updates under row subsampling)."""
    for j in range(rows.shape[0]):
        i = rows[j]
        node = 0
        while feat[node] >= 0:
            v = X[i, feat[node]]
            if np.isnan(v):
                node = left[node] if miss_left[node] else right[node]
            elif np.float64(v) <= thr[node]:
                node = left[node]
            else:
                node = right[node]
        out[j] = value[node]
