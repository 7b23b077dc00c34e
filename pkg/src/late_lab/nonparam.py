"""Epanechnikov product-kernel regression and least-squares cross-validation.

Two estimators share one code path: local constant (Nadaraya-Watson) and
local linear. Bandwidths are per-dimension vectors ``h = factor * h0`` where
``h0`` is Silverman's rule of thumb. When a query point has no training
point inside its kernel window the bandwidth for that point is doubled up to
``MAX_DOUBLINGS`` times, after which the (leave-one-out) global mean is used.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .errors import AllCandidatesDegenerate, EmptyNeighborhood

__all__ = [
    "LOCAL_CONSTANT",
    "LOCAL_LINEAR",
    "DEFAULT_GRID",
    "KernelRegression",
    "epanechnikov",
    "silverman_bandwidth",
    "predict",
    "predict_many",
    "lscv_score",
    "lscv_bandwidth",
    "fit_kernel_regression",
    "fit_in_sample",
]

LOCAL_CONSTANT = "local_constant"
LOCAL_LINEAR = "local_linear"
DEFAULT_GRID = (0.25, 0.5, 1.0, 2.0, 4.0)
MAX_DOUBLINGS = 10
EIG_FLOOR = 1e-10

# status codes returned by the compiled core
_OK, _WIDENED, _GLOBAL = 0, 1, 2


def epanechnikov(u):
    """``0.75 * (1 - u^2)`` on ``|u| <= 1``, zero elsewhere."""
    u = np.asarray(u, dtype=float)
    out = np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u), 0.0)
    return float(out) if out.ndim == 0 else out


def silverman_bandwidth(x) -> np.ndarray:
    """``1.06 * sd(x_j) * n^(-1/5)`` per column; constant columns get 1."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    n = x.shape[0]
    sd = x.std(axis=0, ddof=1) if n > 1 else np.zeros(x.shape[1])
    h = 1.06 * sd * n ** (-0.2)
    return np.where(h > 0, h, 1.0)


@numba.njit(cache=True)
def _local_fit(S0, S1, S2, T0, T1, k, linear):
    """Intercept of a weighted local fit from accumulated sums (coordinates scaled by h)."""
    ybar = T0 / S0
    if not linear or k == 0:
        return ybar
    xbar = S1 / S0
    cov = S2 / S0 - np.outer(xbar, xbar)
    cxy = T1 / S0 - xbar * ybar
    vals, vecs = np.linalg.eigh(cov)
    # h-scaled spreads are O(1); tiny eigenvalues are rounding noise
    tol = max(1e-10 * vals.max(), EIG_FLOOR)
    slope = np.zeros(k)
    if vals.max() > tol:
        proj = vecs.T @ cxy
        for m in range(k):
            if vals[m] > tol:
                slope += vecs[:, m] * (proj[m] / vals[m])
    return ybar - np.dot(xbar, slope)


@numba.njit(cache=True)
def _accumulate(Xtr, ytr, xq, h, skip, linear, S1, S2, T1, sorted_keys, key_order, key):
    n, k = Xtr.shape
    lo = 0
    hi = n
    if k > 0:
        lo = np.searchsorted(sorted_keys, xq[key] - h[key], side="left")
        hi = np.searchsorted(sorted_keys, xq[key] + h[key], side="right")
    S0 = 0.0
    T0 = 0.0
    S1[:] = 0.0
    S2[:, :] = 0.0
    T1[:] = 0.0
    u = np.empty(k)
    for p in range(lo, hi):
        j = key_order[p]
        if j == skip:
            continue
        w = 1.0
        for m in range(k):
            um = (Xtr[j, m] - xq[m]) / h[m]
            if um >= 1.0 or um <= -1.0:
                w = 0.0
                break
            u[m] = um
            w *= 1.0 - um * um
        if w == 0.0:
            continue
        S0 += w
        T0 += w * ytr[j]
        if linear:
            for a in range(k):
                S1[a] += w * u[a]
                T1[a] += w * u[a] * ytr[j]
                for b in range(a + 1):
                    S2[a, b] += w * u[a] * u[b]
    if linear:
        for a in range(k):
            for b in range(a):
                S2[b, a] = S2[a, b]
    return S0, T0


@numba.njit(cache=True)
def _nearest_reach(Xtr, xq, inv_h, skip, sorted_keys, key_order, key):
    """Smallest over training rows of the largest h0-scaled coordinate gap to ``xq``.

    Rows are visited outward from ``xq`` in key-column order so the scan
    stops once the key gap alone exceeds the best value found.
    """
    n, k = Xtr.shape
    best = np.inf
    if k == 0:
        return 0.0 if n > 1 or skip < 0 else np.inf
    start = np.searchsorted(sorted_keys, xq[key])
    left = start - 1
    right = start
    while left >= 0 or right < n:
        gl = (xq[key] - sorted_keys[left]) * inv_h[key] if left >= 0 else np.inf
        gr = (sorted_keys[right] - xq[key]) * inv_h[key] if right < n else np.inf
        if gl <= gr:
            p = left
            left -= 1
            g = gl
        else:
            p = right
            right += 1
            g = gr
        if g >= best:
            break
        j = key_order[p]
        if j == skip:
            continue
        r = 0.0
        for m in range(k):
            a = abs(Xtr[j, m] - xq[m]) * inv_h[m]
            if a > r:
                r = a
                if r >= best:
                    break
        if r < best:
            best = r
    return best


@numba.njit(cache=True)
def _predict_core(Xtr, ytr, Xq, h0, factors, linear, loo, widen, order, key, qlo, qhi):
    """Predictions at every query row for every bandwidth factor.

    ``order`` sorts the training rows by column ``key`` within blocks of
    rows that share the same values on the exactly-matched columns; query
    ``q`` only visits positions ``qlo[q]:qhi[q]`` of that order whose key
    value lies inside the widest window. Returns
    ``(pred, status, S0, T0)`` each of shape ``(n_factors, n_queries)``,
    where ``S0``/``T0`` are the kernel-weight and weighted-response sums
    before any fallback. When ``loo`` is true, query ``q`` is training row
    ``q`` and is left out.
    """
    n, k = Xtr.shape
    nq = Xq.shape[0]
    nf = factors.shape[0]
    pred = np.empty((nf, nq))
    status = np.zeros((nf, nq), dtype=np.int8)
    S0a = np.zeros((nf, nq))
    T0a = np.zeros((nf, nq))
    ysum = ytr.sum()
    S0 = np.zeros(nf)
    T0 = np.zeros(nf)
    S1 = np.zeros((nf, k))
    S2 = np.zeros((nf, k, k))
    T1 = np.zeros((nf, k))
    s1 = np.zeros(k)
    s2 = np.zeros((k, k))
    t1 = np.zeros(k)
    dx = np.empty(k)
    u = np.empty(k)
    inv_h = 1.0 / h0
    fmax = factors.max()
    keys = np.empty(n)
    key_order = np.argsort(Xtr[:, key]) if k > 0 else np.arange(n)
    sorted_keys = np.empty(n)
    if k > 0:
        for p in range(n):
            keys[p] = Xtr[order[p], key]
            sorted_keys[p] = Xtr[key_order[p], key]
    for q in range(nq):
        skip = q if loo else -1
        S0[:] = 0.0
        T0[:] = 0.0
        if linear:
            S1[:, :] = 0.0
            S2[:, :, :] = 0.0
            T1[:, :] = 0.0
        lo = qlo[q]
        hi = qhi[q]
        if k > 0 and hi > lo:
            half = fmax * h0[key]
            block = keys[lo:hi]
            hi = lo + np.searchsorted(block, Xq[q, key] + half, side="right")
            lo = lo + np.searchsorted(block, Xq[q, key] - half, side="left")
        for p in range(lo, hi):
            j = order[p]
            if j == skip:
                continue
            r = 0.0
            for m in range(k):
                dx[m] = (Xtr[j, m] - Xq[q, m]) * inv_h[m]
                a = abs(dx[m])
                if a > r:
                    r = a
                    if r >= fmax:
                        break
            if r >= fmax:
                continue
            for f in range(nf):
                fac = factors[f]
                if r >= fac:
                    continue
                w = 1.0
                for m in range(k):
                    u[m] = dx[m] / fac
                    w *= 1.0 - u[m] * u[m]
                S0[f] += w
                T0[f] += w * ytr[j]
                if linear:
                    yj = ytr[j]
                    for a in range(k):
                        wa = w * u[a]
                        S1[f, a] += wa
                        T1[f, a] += wa * yj
                        for b in range(a + 1):
                            S2[f, a, b] += wa * u[b]
        rmin = -1.0
        for f in range(nf):
            S0a[f, q] = S0[f]
            T0a[f, q] = T0[f]
            if S0[f] > 0.0:
                if linear:
                    for a in range(k):
                        for b in range(a):
                            S2[f, b, a] = S2[f, a, b]
                pred[f, q] = _local_fit(S0[f], S1[f], S2[f], T0[f], T1[f], k, linear)
                continue
            done = False
            if widen:
                if rmin < 0.0:
                    rmin = _nearest_reach(Xtr, Xq[q], inv_h, skip, sorted_keys, key_order, key)
                h = h0 * factors[f]
                fac = factors[f]
                for _ in range(MAX_DOUBLINGS):
                    h = h * 2.0
                    fac = fac * 2.0
                    if fac <= rmin:
                        continue
                    s0, t0 = _accumulate(Xtr, ytr, Xq[q], h, skip, linear, s1, s2, t1,
                                             sorted_keys, key_order, key)
                    if s0 > 0.0:
                        pred[f, q] = _local_fit(s0, s1, s2, t0, t1, k, linear)
                        status[f, q] = 1
                        done = True
                        break
            if not done:
                if loo:
                    pred[f, q] = (ysum - ytr[q]) / (n - 1)
                else:
                    pred[f, q] = ysum / n
                status[f, q] = 2
    return pred, status, S0a, T0a


def _run_core(x, y, xq, h0, factors, mode, loo, widen):
    x = _as_2d(x)
    y = np.ascontiguousarray(np.asarray(y, dtype=float).ravel())
    xq = _as_2d(xq)
    h0 = np.asarray(h0, dtype=float)
    factors = np.asarray(factors, dtype=float)
    if x.shape[1] > 0:
        # columns most likely to put a pair outside the window are checked first
        m = min(x.shape[0], 64)
        reach = factors.max() * h0
        miss = [np.mean(np.abs(x[:m, j, None] - x[None, :m, j]) >= reach[j]) for j in range(x.shape[1])]
        cols = np.argsort(-np.asarray(miss), kind="stable")
        x, xq, h0 = np.ascontiguousarray(x[:, cols]), np.ascontiguousarray(xq[:, cols]), h0[cols]
        key = int(np.argmax([np.unique(x[:, j]).size for j in range(x.shape[1])]))
        order, qlo, qhi = _blocks(x, xq, reach[cols], key)
    else:
        key, order = 0, np.arange(x.shape[0])
        qlo = np.zeros(xq.shape[0], dtype=np.int64)
        qhi = np.full(xq.shape[0], x.shape[0], dtype=np.int64)
    return _predict_core(x, y, xq, h0, factors, mode == LOCAL_LINEAR, loo, widen, order, key, qlo, qhi)


def _blocks(x, xq, reach, key):
    """Sort order and per-query candidate ranges.

    A column whose distinct values (training and query pooled) are at least
    ``reach`` apart can only contribute kernel weight between equal values,
    so training rows are blocked on those columns and each query scans only
    its own block.
    """
    exact = []
    for j in range(x.shape[1]):
        if j == key:
            continue
        vals = np.unique(np.concatenate([x[:, j], xq[:, j]]))
        if vals.size > 1 and np.min(np.diff(vals)) >= reach[j]:
            exact.append(j)
    n, nq = x.shape[0], xq.shape[0]
    if not exact:
        order = np.argsort(x[:, key], kind="stable")
        return order, np.zeros(nq, dtype=np.int64), np.full(nq, n, dtype=np.int64)
    code = np.zeros(n + nq, dtype=np.int64)
    for j in exact:
        _, inv = np.unique(np.concatenate([x[:, j], xq[:, j]]), return_inverse=True)
        code = code * (int(inv.max()) + 1) + inv.ravel()
        _, code = np.unique(code, return_inverse=True)
        code = code.ravel()
    gtr, gq = code[:n], code[n:]
    order = np.lexsort((x[:, key], gtr))
    sorted_g = gtr[order]
    qlo = np.searchsorted(sorted_g, gq, side="left").astype(np.int64)
    qhi = np.searchsorted(sorted_g, gq, side="right").astype(np.int64)
    return order, qlo, qhi


def _as_2d(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    return np.ascontiguousarray(x)


@dataclass(frozen=True)
class KernelRegression:
    """Training data, per-dimension bandwidths and the local polynomial order."""

    x: np.ndarray
    y: np.ndarray
    bandwidth: np.ndarray
    mode: str = LOCAL_CONSTANT

    def __post_init__(self):
        x = _as_2d(self.x)
        y = np.ascontiguousarray(np.asarray(self.y, dtype=float).ravel())
        h = np.asarray(self.bandwidth, dtype=float).ravel()
        if h.size == 1 and x.shape[1] != 1:
            h = np.full(x.shape[1], h[0])
        if x.shape[0] != y.size or x.shape[0] < 2:
            raise ValueError("need at least 2 training rows with matching responses")
        if h.size != x.shape[1] or np.any(h <= 0):
            raise ValueError("bandwidth must hold one positive value per covariate")
        if self.mode not in (LOCAL_CONSTANT, LOCAL_LINEAR):
            raise ValueError(f"unknown mode {self.mode!r}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "bandwidth", h)


def predict(model: KernelRegression, x0) -> float:
    """Prediction at a single covariate row without any bandwidth fallback.

    Raises
    ------
    EmptyNeighborhood
        If no training point receives positive kernel weight at ``x0``.
    """
    xq = _as_2d(np.asarray(x0, dtype=float).reshape(1, -1))
    pred, status, _, _ = _run_core(model.x, model.y, xq, model.bandwidth, np.ones(1),
                                   model.mode, False, False)
    if status[0, 0] != _OK:
        raise EmptyNeighborhood("no training point within the kernel window")
    return float(pred[0, 0])


def predict_many(model: KernelRegression, x0) -> tuple[np.ndarray, int]:
    """Predictions at each row of ``x0`` with the widening fallback.

    Returns the predictions and the number of rows that needed a fallback.
    """
    xq = _as_2d(x0)
    if xq.shape[1] != model.x.shape[1]:
        xq = xq.reshape(-1, model.x.shape[1])
    pred, status, _, _ = _run_core(model.x, model.y, xq, model.bandwidth, np.ones(1),
                                   model.mode, False, True)
    return pred[0], int(np.count_nonzero(status[0]))


def _loo(x, y, h0, factors, mode):
    return _run_core(x, y, x, h0, factors, mode, True, True)


def lscv_score(x, y, bandwidth, mode: str = LOCAL_CONSTANT) -> float:
    """Sum of squared leave-one-out prediction errors at ``bandwidth``."""
    y = np.asarray(y, dtype=float).ravel()
    pred = _loo(x, y, bandwidth, np.ones(1), mode)[0]
    return float(np.sum((y - pred[0]) ** 2))


def _lscv(x, y, mode, grid, baseline):
    grid = np.asarray(sorted(float(g) for g in grid))
    if grid.size == 0 or np.any(grid <= 0):
        raise ValueError("grid must contain positive scale factors")
    x = _as_2d(x)
    y = np.asarray(y, dtype=float).ravel()
    h0 = silverman_bandwidth(x) if baseline is None else np.asarray(baseline, dtype=float)
    pred, status, S0, T0 = _loo(x, y, h0, grid, mode)
    scores = np.sum((y[None, :] - pred) ** 2, axis=1)
    degenerate = np.any(status == _GLOBAL, axis=1)
    if grid.size == 1:
        return grid[0] * h0, S0[0], T0[0]
    scores = np.where(degenerate, np.inf, scores)
    if not np.any(np.isfinite(scores)):
        raise AllCandidatesDegenerate("every bandwidth candidate left some point without neighbours")
    best = int(np.argmin(scores))
    return grid[best] * h0, S0[best], T0[best]


def lscv_bandwidth(x, y, mode: str = LOCAL_CONSTANT, grid=DEFAULT_GRID,
                   baseline=None) -> np.ndarray:
    """Bandwidth vector minimizing the leave-one-out squared error over ``grid``.

    Candidates are ``factor * baseline`` (Silverman's rule by default). Ties
    go to the smallest factor. A candidate that forces the global-mean
    fallback for any observation is treated as degenerate.

    Raises
    ------
    AllCandidatesDegenerate
        If every candidate is degenerate.
    """
    return _lscv(x, y, mode, grid, baseline)[0]


def fit_kernel_regression(x, y, mode: str | None = None, grid=DEFAULT_GRID) -> KernelRegression:
    """LSCV-tuned kernel regression; binary responses default to local constant."""
    y = np.asarray(y, dtype=float).ravel()
    if mode is None:
        mode = LOCAL_CONSTANT if np.all((y == 0) | (y == 1)) else LOCAL_LINEAR
    h = lscv_bandwidth(x, y, mode, grid)
    return KernelRegression(x, y, h, mode)


def fit_in_sample(x, y, mode: str | None = None, grid=DEFAULT_GRID) -> tuple[KernelRegression, np.ndarray]:
    """LSCV-tuned fit together with its in-sample fitted values.

    For local constant fits the fitted values are recovered from the
    leave-one-out sums by adding back each point's own unit weight, so no
    second pass over the data is needed.
    """
    y = np.asarray(y, dtype=float).ravel()
    if mode is None:
        mode = LOCAL_CONSTANT if np.all((y == 0) | (y == 1)) else LOCAL_LINEAR
    h, S0, T0 = _lscv(x, y, mode, grid, None)
    model = KernelRegression(x, y, h, mode)
    if mode == LOCAL_CONSTANT:
        return model, (T0 + y) / (S0 + 1.0)
    return model, predict_many(model, model.x)[0]
