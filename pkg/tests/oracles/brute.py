"""Slow, obviously-correct references. Nothing here imports late_lab."""

from __future__ import annotations

import math

import numpy as np

EPS = 1e-12


# ---------------------------------------------------------------- kernel regression


def _epa(u):
    return 0.75 * (1.0 - u * u) if abs(u) < 1.0 else 0.0


def _weights(x, x0, h, skip):
    n, k = x.shape
    w = np.zeros(n)
    for j in range(n):
        if j == skip:
            continue
        prod = 1.0
        for m in range(k):
            prod *= _epa((x[j, m] - x0[m]) / h[m])
        w[j] = prod
    return w


def _local_value(x, y, x0, w, h, linear):
    """Weighted local fit at x0.

    Local linear fits use bandwidth-scaled offsets; when the weighted
    covariance of the offsets is singular the slope is the minimum-norm
    solution over eigen-directions above 1e-10 (relative and absolute).
    """
    if not linear:
        return float(w @ y / w.sum())
    sel = w > 0
    W = w[sel] / w[sel].sum()
    U = (x[sel] - x0) / h
    ubar = W @ U
    ybar = W @ y[sel]
    C = U - ubar
    cov = (C * W[:, None]).T @ C
    cxy = (C * W[:, None]).T @ (y[sel] - ybar)
    vals, vecs = np.linalg.eigh(cov)
    tol = max(1e-10 * vals.max(), 1e-10)
    keep = vals > tol
    slope = vecs[:, keep] @ ((vecs[:, keep].T @ cxy) / vals[keep])
    return float(ybar - ubar @ slope)


def loo_predictions(x, y, h, linear=False, max_doublings=10):
    """Leave-one-out kernel predictions with per-point bandwidth doubling, then the LOO mean."""
    x = np.asarray(x, dtype=float).reshape(len(y), -1)
    y = np.asarray(y, dtype=float)
    n = len(y)
    out = np.empty(n)
    for i in range(n):
        hi = np.asarray(h, dtype=float).copy()
        val = None
        for _ in range(max_doublings + 1):
            w = _weights(x, x[i], hi, i)
            if w.sum() > 0:
                val = _local_value(x, y, x[i], w, hi, linear)
                break
            hi = hi * 2.0
        out[i] = val if val is not None else (y.sum() - y[i]) / (n - 1)
    return out


def lscv_objective(x, y, h, linear=False):
    pred = loo_predictions(x, y, h, linear)
    return float(np.sum((np.asarray(y, dtype=float) - pred) ** 2))


# ---------------------------------------------------------------- matching


def nearest_plan(coords, z):
    """Pair matching by full scan: lowest index wins ties. Returns (matches, max distance)."""
    n = len(z)
    match = {}
    worst = 0.0
    for i in range(n):
        best_j, best_d = -1, math.inf
        for j in range(n):
            if z[j] == z[i]:
                continue
            d = math.sqrt(sum((coords[i][m] - coords[j][m]) ** 2 for m in range(len(coords[i]))))
            if d < best_d:
                best_j, best_d = j, d
        match[i] = ([best_j], [1.0])
        worst = max(worst, best_d)
    return match, worst


def radius_plan(coords, z, multiplier):
    pairs, worst = nearest_plan(coords, z)
    radius = multiplier * worst
    out = {}
    for i in range(len(z)):
        idx, w = [], []
        for j in range(len(z)):
            if z[j] == z[i]:
                continue
            d = math.sqrt(sum((coords[i][m] - coords[j][m]) ** 2 for m in range(len(coords[i]))))
            if d <= radius:
                idx.append(j)
                w.append(1.0 / (d + EPS))
        if not idx:
            out[i] = pairs[i]
        else:
            s = sum(w)
            out[i] = (idx, [v / s for v in w])
    return out, worst, radius


def greedy_without_replacement(refs, donors, M):
    """Each reference in turn takes its M nearest unclaimed donors, ranked by (distance, index)."""
    refs = np.asarray(refs, dtype=float).reshape(len(refs), -1)
    donors = np.asarray(donors, dtype=float).reshape(len(donors), -1)
    taken = set()
    out = []
    for r in refs:
        ranked = sorted((float(np.sum((dn - r) ** 2)), j) for j, dn in enumerate(donors) if j not in taken)
        pick = [j for _, j in ranked[:M]]
        taken.update(pick)
        out.append(pick)
    return out


# ---------------------------------------------------------------- likelihood and GMM


def _ndtr(t):
    return 0.5 * math.erfc(-t / math.sqrt(2.0))


def binary_loglik(beta, X, z, link):
    ll = 0.0
    for row, zi in zip(X, z):
        eta = sum(b * v for b, v in zip(beta, row))
        if link == "probit":
            p = _ndtr(eta)
        else:
            p = 1.0 / (1.0 + math.exp(-eta))
        p = min(max(p, 1e-300), 1.0 - 1e-16)
        ll += math.log(p) if zi == 1 else math.log(1.0 - p)
    return ll


def zoom_maximize(f, center, width, points=21, rounds=40):
    """Coordinate-free grid search: evaluate a full grid, recenter on the best point, shrink the box."""
    center = np.asarray(center, dtype=float)
    width = np.asarray(width, dtype=float)
    dim = center.size
    for _ in range(rounds):
        axes = [np.linspace(c - w, c + w, points) for c, w in zip(center, width)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dim)
        vals = np.array([f(g) for g in grid])
        center = grid[int(np.argmax(vals))]
        width = width * 0.35
    return center


def cue_value(gmat, ridge=1e-8):
    g = np.asarray(gmat, dtype=float)
    gbar = g.mean(axis=0)
    c = g - gbar
    S = c.T @ c / g.shape[0] + ridge * np.eye(g.shape[1])
    return float(gbar @ np.linalg.solve(S, gbar))


# ---------------------------------------------------------------- trimming and metrics


def trim_shares(z, p):
    a = [zi / pi for zi, pi in zip(z, p)]
    b = [(1 - zi) / (1 - pi) for zi, pi in zip(z, p)]
    sa, sb = sum(a), sum(b)
    return [ai / sa + bi / sb for ai, bi in zip(a, b)]


def aggregate_rows(rows, true_late, se_limit=150.0, point_limit=1e10, level_z=None):
    """Recompute the metrics of one (DGP, estimator) pair from replication dicts."""
    theta = [r["theta"] for r in rows if math.isfinite(r["theta"]) and abs(r["theta"]) < point_limit]
    n = len(theta)
    mean = sum(theta) / n
    sd = 0.0 if len(set(theta)) == 1 else math.sqrt(sum((t - mean) ** 2 for t in theta) / n)
    bias = mean - true_late
    rmse = math.sqrt(sum((t - true_late) ** 2 for t in theta) / n)
    se_ok = []
    for r in rows:
        if not (math.isfinite(r["theta"]) and abs(r["theta"]) < point_limit):
            continue
        if not all(math.isfinite(r[k]) for k in ("se", "ci_lower", "ci_upper")):
            continue
        if sd > 0 and r["se"] >= se_limit * sd:
            continue
        se_ok.append(r)
    m = len(se_ok)
    covered = sum(1 for r in se_ok if r["ci_lower"] <= true_late <= r["ci_upper"])
    length = sum(r["ci_upper"] - r["ci_lower"] for r in se_ok) / m if m else math.nan
    ses = sorted(r["se"] for r in se_ok)
    if m:
        med = ses[m // 2] if m % 2 else 0.5 * (ses[m // 2 - 1] + ses[m // 2])
    else:
        med = math.nan
    return {
        "nsimp": n,
        "nsimse": m,
        "coverage": 100.0 * covered / m if m else math.nan,
        "interval_length": length,
        "abs_bias": abs(bias),
        "sd": sd,
        "rmse": rmse,
        "se_bias": med - sd,
    }


def cbps_criterion(beta, X, z, ridge=1e-8):
    """CBPS CUE value with the model-implied weighting, accumulated row by row."""
    n, p = X.shape
    gbar = np.zeros(2 * p)
    S = np.zeros((2 * p, 2 * p))
    for row, zi in zip(X, z):
        pi = 1.0 / (1.0 + math.exp(-float(row @ beta)))
        v = pi * (1.0 - pi)
        gbar[:p] += row * (zi - pi) / n
        gbar[p:] += row * (zi / pi - (1 - zi) / (1 - pi)) / n
        xx = np.outer(row, row) / n
        S[:p, :p] += v * xx
        S[:p, p:] += xx
        S[p:, :p] += xx
        S[p:, p:] += xx / v
    S += ridge * np.eye(2 * p)
    return float(gbar @ np.linalg.solve(S, gbar))
