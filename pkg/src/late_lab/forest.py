"""Honest regression forest.

Each tree draws a subsample without replacement, grows CART splits on one
half of it (the structure half) and fills its leaves with outcome means from
the other half (the estimation half). Randomness comes from a counter-based
hash of ``(seed, tree, draw)`` so every tree has its own reproducible stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import InsufficientData

__all__ = ["ForestParams", "HonestForest", "fit_forest", "predict_forest", "honest_leaf_values"]

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 500
    subsample: float = 0.5
    min_leaf: int = 5
    mtry: int | None = None  # default ceil(sqrt(K))

    def resolved_mtry(self, k: int) -> int:
        if self.mtry is None:
            return max(1, math.ceil(math.sqrt(k)))
        return max(1, min(int(self.mtry), k))


@dataclass(frozen=True)
class HonestForest:
    """Fitted trees stored as flat node arrays.

    Nodes of tree ``t`` occupy ``tree_start[t]:tree_start[t + 1]``; child
    pointers are absolute. Leaves have ``feature == -1``. ``structure`` and
    ``estimation`` hold each tree's two subsample halves (row indices into
    the training data).
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    tree_start: np.ndarray
    structure: np.ndarray
    estimation: np.ndarray
    params: ForestParams = field(default_factory=ForestParams)
    seed: int = 0

    @property
    def n_trees(self) -> int:
        return self.tree_start.size - 1


@numba.njit(cache=True)
def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@numba.njit(cache=True)
def _uniform(key, counter):
    """Uniform [0, 1) double from the splitmix64 hash of ``key + counter * golden``."""
    z = _mix(key + (np.uint64(counter) + np.uint64(1)) * _GOLDEN)
    return (z >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@numba.njit(cache=True)
def _randint(key, counter, upper):
    return min(int(_uniform(key, counter) * upper), upper - 1)


@numba.njit(cache=True)
def _grow_tree(X, y, struct, est, key, counter0, min_leaf, mtry,
               feature, threshold, left, right, value, base, global_order, stamp, tree_id,
               list_feats, slot, lo_val, hi_val, srt, stack, tmp, feats, e_idx):
    """Grow one tree into the node arrays starting at ``base``; returns the node count.

    Structure rows are kept pre-sorted by every feature (``srt[f]``); a split
    stably partitions each sorted list, so no sorting happens below the root.
    The root lists are read off the forest-wide sort ``global_order`` by
    picking rows whose ``stamp`` equals ``tree_id``. Two-valued features
    (``slot[f] < 0``) keep no list: their single candidate split is scored
    from a count and a sum over the node, read off list 0.
    """
    k = X.shape[1]
    counter = counter0
    ns = struct.size
    ne = est.size
    nlists = list_feats.size
    for i in range(ns):
        stamp[struct[i]] = tree_id
    n = X.shape[0]
    for li in range(nlists):
        c = 0
        for i in range(n):
            row = global_order[li, i]
            if c < ns:
                srt[li, c] = row
            c += stamp[row] == tree_id
    # work buffers are owned by the caller and reused across trees
    for i in range(ne):
        e_idx[i] = est[i]
    st_node = stack[0]
    st_slo = stack[1]
    st_shi = stack[2]
    st_elo = stack[3]
    st_ehi = stack[4]
    for f in range(k):
        feats[f] = f

    # root value: honest mean, or the structure mean if the estimation half is empty
    tot = 0.0
    if ne > 0:
        for i in range(ne):
            tot += y[e_idx[i]]
        root_val = tot / ne
    else:
        for i in range(ns):
            tot += y[struct[i]]
        root_val = tot / ns
    n_nodes = 1
    feature[base] = -1
    value[base] = root_val
    st_node[0] = base
    st_slo[0] = 0
    st_shi[0] = ns
    st_elo[0] = 0
    st_ehi[0] = ne
    top = 1
    while top > 0:
        top -= 1
        node = st_node[top]
        slo = st_slo[top]
        shi = st_shi[top]
        elo = st_elo[top]
        ehi = st_ehi[top]
        m = shi - slo
        if m < 2 * min_leaf:
            continue
        # choose mtry candidate features by partial Fisher-Yates
        for j in range(mtry):
            r = j + _randint(key, counter, k - j)
            counter += 1
            t = feats[j]
            feats[j] = feats[r]
            feats[r] = t
        tot = 0.0
        for i in range(slo, shi):
            tot += y[srt[0, i]]
        base_sse = tot * tot / m
        best_gain = 0.0
        best_f = -1
        best_thr = 0.0
        for jj in range(mtry):
            f = feats[jj]
            li = slot[f]
            if li < 0:
                lo = lo_val[f]
                nl = 0
                sl = 0.0
                for i in range(slo, shi):
                    row = srt[0, i]
                    is_lo = X[row, f] <= lo
                    nl += is_lo
                    sl += y[row] * is_lo
                if nl < min_leaf or m - nl < min_leaf:
                    continue
                sr = tot - sl
                gain = sl * sl / nl + sr * sr / (m - nl) - base_sse
                if gain > best_gain * (1.0 + 1e-12) + 1e-12 * abs(base_sse) + 1e-300:
                    best_gain = gain
                    best_f = f
                    best_thr = 0.5 * (lo + hi_val[f])
                continue
            sl = 0.0
            for i in range(m - 1):
                row = srt[li, slo + i]
                sl += y[row]
                nl = i + 1
                if nl < min_leaf or m - nl < min_leaf:
                    continue
                v0 = X[row, f]
                v1 = X[srt[li, slo + i + 1], f]
                if v1 <= v0:
                    continue
                sr = tot - sl
                gain = sl * sl / nl + sr * sr / (m - nl) - base_sse
                if gain > best_gain * (1.0 + 1e-12) + 1e-12 * abs(base_sse) + 1e-300:
                    best_gain = gain
                    best_f = f
                    best_thr = 0.5 * (v0 + v1)
        if best_f < 0:
            continue
        # stable partition of every sorted list
        nl = 0
        for li in range(nlists):
            a = 0
            b = 0
            for i in range(slo, shi):
                row = srt[li, i]
                go_left = X[row, best_f] <= best_thr
                # branch-free: write to both destinations, advance one
                srt[li, slo + a] = row
                tmp[b] = row
                a += go_left
                b += 1 - go_left
            for i in range(b):
                srt[li, slo + a + i] = tmp[i]
            nl = a
        # partition estimation rows
        el = 0
        er = 0
        for i in range(elo, ehi):
            row = e_idx[i]
            go_left = X[row, best_f] <= best_thr
            e_idx[elo + el] = row
            tmp[er] = row
            el += go_left
            er += 1 - go_left
        for i in range(er):
            e_idx[elo + el + i] = tmp[i]
        lnode = base + n_nodes
        rnode = lnode + 1
        n_nodes += 2
        feature[node] = best_f
        threshold[node] = best_thr
        left[node] = lnode
        right[node] = rnode
        for child, clo, chi in ((lnode, elo, elo + el), (rnode, elo + el, ehi)):
            feature[child] = -1
            cnt = chi - clo
            if cnt >= min_leaf:
                s = 0.0
                for i in range(clo, chi):
                    s += y[e_idx[i]]
                value[child] = s / cnt
            else:
                value[child] = value[node]
        st_node[top] = lnode
        st_slo[top] = slo
        st_shi[top] = slo + nl
        st_elo[top] = elo
        st_ehi[top] = elo + el
        top += 1
        st_node[top] = rnode
        st_slo[top] = slo + nl
        st_shi[top] = shi
        st_elo[top] = elo + el
        st_ehi[top] = ehi
        top += 1
    return n_nodes


@numba.njit(cache=True)
def _fit_all(X, y, n_trees, m, half, min_leaf, mtry, seed, list_feats, slot, lo_val, hi_val):
    n = X.shape[0]
    cap = 2 * half + 1
    feature = np.full(n_trees * cap, -1, dtype=np.int64)
    threshold = np.zeros(n_trees * cap)
    left = np.full(n_trees * cap, -1, dtype=np.int64)
    right = np.full(n_trees * cap, -1, dtype=np.int64)
    value = np.zeros(n_trees * cap)
    counts = np.zeros(n_trees, dtype=np.int64)
    structure = np.empty((n_trees, half), dtype=np.int64)
    estimation = np.empty((n_trees, m - half), dtype=np.int64)
    perm = np.empty(n, dtype=np.int64)
    k = X.shape[1]
    global_order = np.empty((list_feats.size, n), dtype=np.int64)
    for li in range(list_feats.size):
        global_order[li] = np.argsort(X[:, list_feats[li]], kind="mergesort")
    stamp = np.full(n, -1, dtype=np.int64)
    srt = np.empty((list_feats.size, half), dtype=np.int64)
    stack = np.empty((5, 2 * half + 1), dtype=np.int64)
    buf = np.empty(max(half, m - half), dtype=np.int64)
    feats = np.empty(k, dtype=np.int64)
    e_idx = np.empty(m - half, dtype=np.int64)
    seed_key = _mix(np.uint64(seed) ^ np.uint64(0x5DEECE66D))
    for t in range(n_trees):
        key = _mix(seed_key + np.uint64(t) * _GOLDEN)
        counter = 0
        for i in range(n):
            perm[i] = i
        for j in range(m):
            r = j + _randint(key, counter, n - j)
            counter += 1
            tmp = perm[j]
            perm[j] = perm[r]
            perm[r] = tmp
        for j in range(half):
            structure[t, j] = perm[j]
        for j in range(m - half):
            estimation[t, j] = perm[half + j]
        counts[t] = _grow_tree(X, y, structure[t], estimation[t], key, counter, min_leaf, mtry,
                               feature, threshold, left, right, value, t * cap,
                               global_order, stamp, t, list_feats, slot, lo_val, hi_val,
                               srt, stack, buf, feats, e_idx)
    return feature, threshold, left, right, value, counts, structure, estimation, cap


@numba.njit(cache=True)
def _compact(feature, threshold, left, right, value, counts, cap):
    """Drop the unused tail of every tree's node block and rebase child pointers."""
    n_trees = counts.size
    start = np.zeros(n_trees + 1, dtype=np.int64)
    for t in range(n_trees):
        start[t + 1] = start[t] + counts[t]
    total = start[n_trees]
    f = np.empty(total, dtype=np.int64)
    th = np.empty(total)
    lf = np.empty(total, dtype=np.int64)
    rt = np.empty(total, dtype=np.int64)
    v = np.empty(total)
    for t in range(n_trees):
        shift = start[t] - t * cap
        for j in range(counts[t]):
            src = t * cap + j
            dst = start[t] + j
            f[dst] = feature[src]
            th[dst] = threshold[src]
            v[dst] = value[src]
            if left[src] >= 0:
                lf[dst] = left[src] + shift
                rt[dst] = right[src] + shift
            else:
                lf[dst] = -1
                rt[dst] = -1
    return f, th, lf, rt, v, start


def _feature_layout(X):
    """Sorted-list slots for features with more than two values; value pairs for the rest."""
    k = X.shape[1]
    slot = np.full(k, -1, dtype=np.int64)
    lo_val = np.zeros(k)
    hi_val = np.zeros(k)
    lists = []
    for f in range(k):
        u = np.unique(X[:, f])
        if u.size > 2:
            slot[f] = len(lists)
            lists.append(f)
        else:
            lo_val[f] = u[0]
            hi_val[f] = u[-1]
    if not lists:
        lists.append(0)  # list 0 also enumerates the rows of a node
    return np.array(lists, dtype=np.int64), slot, lo_val, hi_val


def fit_forest(x, y, params: ForestParams | None = None, seed: int = 0) -> HonestForest:
    """Grow an honest regression forest.

    Every tree uses ``floor(subsample * n)`` rows drawn without replacement;
    the first half (rounded down) grows the splits, the rest sets the leaf
    means. Splits maximize the reduction in squared error over ``mtry``
    randomly chosen features and need ``min_leaf`` structure rows on each
    side. Leaves with fewer than ``min_leaf`` estimation rows inherit their
    parent's value.

    Raises
    ------
    InsufficientData
        If ``n < 2 * min_leaf``.
    """
    params = params or ForestParams()
    X = np.ascontiguousarray(np.asarray(x, dtype=float).reshape(len(y), -1))
    y = np.ascontiguousarray(np.asarray(y, dtype=float).ravel())
    n, k = X.shape
    if params.n_trees < 1:
        raise ValueError("n_trees must be positive")
    if not 0.0 < params.subsample <= 1.0:
        raise ValueError("subsample must be in (0, 1]")
    if n < 2 * params.min_leaf or n < 2:
        raise InsufficientData(f"need at least {2 * params.min_leaf} rows, got {n}")
    m = int(math.floor(params.subsample * n))
    if m < 2:
        raise InsufficientData(f"subsample of {m} rows is too small")
    half = m // 2
    mtry = params.resolved_mtry(k) if k > 0 else 0
    if k == 0:
        X = np.zeros((n, 1))
        mtry = 1
    seed_u = int(seed) % (1 << 64)
    out = _fit_all(X, y, int(params.n_trees), m, half, int(params.min_leaf), int(mtry), np.uint64(seed_u),
                   *_feature_layout(X))
    feature, threshold, left, right, value, counts, structure, estimation, cap = out
    f, t, lf, rt, v, start = _compact(feature, threshold, left, right, value, counts, cap)
    arrays = [f, t, lf, rt, v, start, structure, estimation]
    for a in arrays:
        a.setflags(write=False)
    return HonestForest(*arrays, params=params, seed=int(seed))


@numba.njit(cache=True)
def _tree_depths(feature, left, tree_start):
    n_trees = tree_start.size - 1
    depth = np.zeros(feature.size, dtype=np.int64)
    out = np.zeros(n_trees, dtype=np.int64)
    for t in range(n_trees):
        best = 0
        # children are stored after their parent, so one forward pass suffices
        for node in range(tree_start[t], tree_start[t + 1]):
            if feature[node] >= 0:
                depth[left[node]] = depth[node] + 1
                depth[left[node] + 1] = depth[node] + 1
            elif depth[node] > best:
                best = depth[node]
        out[t] = best
    return out


@numba.njit(cache=True)
def _predict(feature, threshold, left, value, tree_start, depths, Xq):
    """Level-synchronous descent: leaves loop onto themselves, so every query takes ``depth`` steps.

    The steps of different queries are independent, which hides the memory
    latency of the node lookups.
    """
    nq = Xq.shape[0]
    n_trees = tree_start.size - 1
    n_nodes = feature.size
    feat = np.empty(n_nodes, dtype=np.int64)
    thr = np.empty(n_nodes)
    nxt = np.empty(n_nodes, dtype=np.int64)
    for node in range(n_nodes):
        if feature[node] >= 0:
            feat[node] = feature[node]
            thr[node] = threshold[node]
            nxt[node] = left[node]
        else:
            feat[node] = 0
            thr[node] = np.inf
            nxt[node] = node
    out = np.zeros(nq)
    cur = np.empty(nq, dtype=np.int64)
    for t in range(n_trees):
        root = tree_start[t]
        for q in range(nq):
            cur[q] = root
        for _ in range(depths[t]):
            for q in range(nq):
                node = cur[q]
                cur[q] = nxt[node] + (Xq[q, feat[node]] > thr[node])
        for q in range(nq):
            out[q] += value[cur[q]]
    for q in range(nq):
        out[q] /= n_trees
    return out


def predict_forest(model: HonestForest, x0):
    """Average of the per-tree leaf values.

    A 1-D ``x0`` is one covariate row and gives a float; a 2-D array gives
    one prediction per row.
    """
    xq = np.asarray(x0, dtype=float)
    single = xq.ndim < 2
    xq = xq.reshape(1, -1) if single else xq
    if xq.shape[1] == 0:
        xq = np.zeros((xq.shape[0], 1))
    depths = _tree_depths(model.feature, model.left, model.tree_start)
    out = _predict(model.feature, model.threshold, model.left, model.value, model.tree_start, depths,
                   np.ascontiguousarray(xq))
    return float(out[0]) if single else out


@numba.njit(cache=True)
def _repopulate(feature, threshold, left, right, tree_start, estimation, X, y, min_leaf, value):
    n_trees = tree_start.size - 1
    ne = estimation.shape[1]
    for t in range(n_trees):
        lo = tree_start[t]
        hi = tree_start[t + 1]
        sums = np.zeros(hi - lo)
        cnts = np.zeros(hi - lo, dtype=np.int64)
        for i in range(ne):
            row = estimation[t, i]
            node = lo
            sums[0] += y[row]
            cnts[0] += 1
            while feature[node] >= 0:
                if X[row, feature[node]] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
                sums[node - lo] += y[row]
                cnts[node - lo] += 1
        # nodes are numbered parent-before-child, so one forward pass resolves fallbacks
        if cnts[0] > 0:
            value[lo] = sums[0] / cnts[0]
        for node in range(lo, hi):
            if feature[node] >= 0:
                for child in (left[node], right[node]):
                    c = child - lo
                    value[child] = sums[c] / cnts[c] if cnts[c] >= min_leaf else value[node]
    return value


def honest_leaf_values(model: HonestForest, x, y) -> np.ndarray:
    """Node values recomputed from ``y`` on each tree's estimation half, splits held fixed.

    With the training ``y`` this reproduces ``model.value``; it lets tests
    check that structure-half responses never enter a leaf mean.
    """
    X = np.ascontiguousarray(np.asarray(x, dtype=float).reshape(len(y), -1))
    if X.shape[1] == 0:
        X = np.zeros((X.shape[0], 1))
    y = np.ascontiguousarray(np.asarray(y, dtype=float).ravel())
    value = np.array(model.value, dtype=float, copy=True)
    return _repopulate(model.feature, model.threshold, model.left, model.right, model.tree_start,
                       model.estimation, X, y, int(model.params.min_leaf), value)
