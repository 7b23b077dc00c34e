"""Instrument propensity scores: probit, covariate-balancing (CBPS) and local-constant kernel."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numba
import numpy as np
from scipy import special

from .dataset import Dataset
from .nonparam import DEFAULT_GRID, LOCAL_CONSTANT, fit_in_sample
from .errors import NonFiniteObjective
from .numopt import PROB_CLAMP, GmmFit, GmmOptions, add_intercept, fit_binary_glm

__all__ = [
    "PropensityFit",
    "PROBIT",
    "CBPS",
    "KERNEL",
    "METHODS",
    "fit_probit_ps",
    "fit_cbps_ps",
    "fit_kernel_ps",
    "fit_propensity",
    "cbps_moments",
    "cbps_objective",
    "cbps_weighting",
    "clamp",
]

PROBIT = "probit"
CBPS = "cbps"
KERNEL = "local_constant"
METHODS = (PROBIT, CBPS, KERNEL)


def clamp(p) -> np.ndarray:
    return np.clip(np.asarray(p, dtype=float), PROB_CLAMP, 1.0 - PROB_CLAMP)


@dataclass(frozen=True)
class PropensityFit:
    """Fitted ``P(z = 1 | x)`` for every sample row.

    ``model`` holds the backend payload: a :class:`~late_lab.numopt.GlmFit`,
    :class:`~late_lab.numopt.GmmFit` or
    :class:`~late_lab.nonparam.KernelRegression`.
    """

    scores: np.ndarray
    method: str
    model: Any = None

    def __post_init__(self):
        s = np.array(self.scores, dtype=float, copy=True).ravel()
        if not np.all((s > 0.0) & (s < 1.0)):
            raise ValueError("propensity scores must lie strictly inside (0, 1)")
        s.setflags(write=False)
        object.__setattr__(self, "scores", s)

    def __len__(self):
        return self.scores.size


def _design(data: Dataset) -> np.ndarray:
    return add_intercept(data.x)


def fit_probit_ps(data: Dataset) -> PropensityFit:
    """Probit regression of the instrument on an intercept and the covariates."""
    X = _design(data)
    fit = fit_binary_glm(X, data.z, "probit")
    return PropensityFit(clamp(fit.predict(X)), PROBIT, fit)


def cbps_moments(beta, design, z) -> np.ndarray:
    """Per-observation CBPS moments: logit score stacked with the balancing conditions.

    Row ``i`` is ``[x_i (z_i - pi_i), x_i (z_i - pi_i) / (pi_i (1 - pi_i))]`` with
    ``pi_i = expit(x_i' beta)``, so the balancing block is
    ``x_i (z_i / pi_i - (1 - z_i) / (1 - pi_i))``.
    """
    pi = clamp(special.expit(design @ beta))
    r = z - pi
    score = design * r[:, None]
    return np.hstack([score, score / (pi * (1.0 - pi))[:, None]])


def cbps_weighting(beta, design) -> np.ndarray:
    """Model-implied variance of the CBPS moments at ``beta``.

    Blocks are ``mean(v x x')``, ``mean(x x')`` and ``mean(x x' / v)`` with
    ``v = pi (1 - pi)``; unlike the sample covariance it does not depend on z.
    """
    pi = clamp(special.expit(design @ beta))
    v = pi * (1.0 - pi)
    n = design.shape[0]
    a = (design * v[:, None]).T @ design / n
    b = design.T @ design / n
    c = (design / v[:, None]).T @ design / n
    return np.block([[a, b], [b, c]])


def cbps_objective(beta, design, z, ridge: float = 1e-8) -> float:
    """CUE criterion ``gbar' Sigma(beta)^-1 gbar`` with the model-implied weighting."""
    gbar = cbps_moments(beta, design, z).mean(axis=0)
    S = cbps_weighting(beta, design) + ridge * np.eye(gbar.size)
    return float(gbar @ np.linalg.solve(S, gbar))


@numba.njit(cache=True)
def _cbps_eval(beta, X, P, z, ridge, want_grad):
    """CBPS criterion and, optionally, its gradient.

    The weighting blocks are assembled from the precomputed row products
    ``P[i] = vech(x_i x_i')`` weighted by ``{v, 1, 1/v}``, so no n x 2p
    matrix is formed. With ``a = S^-1 gbar``, ``u1 = a1'x`` and ``u2 = a2'x``
    the gradient is
    ``-(2/n) sum c_i x_i - (1/n) sum (u1^2 - u2^2 / v^2) v (1 - 2 pi) x_i``
    where ``-c_i x_i`` is the derivative of ``a'g_i``. Clamped scores have
    zero derivative.
    """
    n, p = X.shape
    m = 2 * p
    grad = np.zeros(p)
    W = np.empty((n, 3))
    g = np.zeros(m)
    eta = X @ beta
    pis = np.empty(n)
    for i in range(n):
        e = eta[i]
        if e >= 0.0:
            pi = 1.0 / (1.0 + np.exp(-e))
        else:
            t = np.exp(e)
            pi = t / (1.0 + t)
        pi = min(max(pi, PROB_CLAMP), 1.0 - PROB_CLAMP)
        v = pi * (1.0 - pi)
        r = z[i] - pi
        pis[i] = pi
        for a in range(p):
            g[a] += X[i, a] * r
            g[p + a] += X[i, a] * r / v
        W[i, 0] = v
        W[i, 1] = 1.0
        W[i, 2] = 1.0 / v
    G = P.T @ W
    for a in range(m):
        g[a] /= n
    S = np.empty((m, m))
    c = 0
    for a in range(p):
        for b in range(a + 1):
            S[a, b] = G[c, 0] / n
            S[p + a, p + b] = G[c, 2] / n
            S[p + a, b] = G[c, 1] / n
            S[p + b, a] = G[c, 1] / n
            c += 1
    for a in range(m):
        if not np.isfinite(S[a, a]):
            return np.inf, grad
        S[a, a] += ridge
    # Cholesky of the lower triangle, then ||L^-1 g||^2
    L = np.zeros((m, m))
    for j in range(m):
        s = S[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not s > 0.0:
            return np.inf, grad
        L[j, j] = np.sqrt(s)
        for i in range(j + 1, m):
            t = S[i, j]
            for k in range(j):
                t -= L[i, k] * L[j, k]
            L[i, j] = t / L[j, j]
    y = np.empty(m)
    q = 0.0
    for i in range(m):
        t = g[i]
        for k in range(i):
            t -= L[i, k] * y[k]
        y[i] = t / L[i, i]
        q += y[i] * y[i]
    if not want_grad:
        return q, grad
    av = np.empty(m)
    for i in range(m - 1, -1, -1):
        t = y[i]
        for k in range(i + 1, m):
            t -= L[k, i] * av[k]
        av[i] = t / L[i, i]
    for i in range(n):
        pi = pis[i]
        if pi <= PROB_CLAMP or pi >= 1.0 - PROB_CLAMP:
            continue
        v = pi * (1.0 - pi)
        u1 = 0.0
        u2 = 0.0
        for a in range(p):
            u1 += av[a] * X[i, a]
            u2 += av[p + a] * X[i, a]
        s_i = (1.0 - pi) / pi if z[i] == 1.0 else pi / (1.0 - pi)
        ci = v * u1 + s_i * u2
        coef = -2.0 * ci - (u1 * u1 - u2 * u2 / (v * v)) * v * (1.0 - 2.0 * pi)
        for a in range(p):
            grad[a] += coef * X[i, a]
    for a in range(p):
        grad[a] /= n
    return q, grad


@numba.njit(cache=True)
def _cbps_cue(beta, X, P, z, ridge):
    return _cbps_eval(beta, X, P, z, ridge, False)[0]


@numba.njit(cache=True)
def _cbps_bfgs(beta0, X, P, z, ridge, gtol, max_iter):
    """BFGS on the CBPS criterion with an Armijo backtracking line search.

    Returns ``(beta, q, converged, n_evals)``. Curvature pairs with
    ``s'y <= 0`` are skipped so the inverse Hessian stays positive definite.
    """
    p = beta0.size
    b = beta0.copy()
    q, g = _cbps_eval(b, X, P, z, ridge, True)
    nev = 1
    H = np.eye(p)
    converged = False
    for _ in range(max_iter):
        if np.max(np.abs(g)) < gtol:
            converged = True
            break
        d = -(H @ g)
        slope = g @ d
        if not slope < 0.0:
            H = np.eye(p)
            d = -g
            slope = g @ d
        step = 1.0
        accepted = False
        for _ in range(60):
            bn = b + step * d
            qn, gn = _cbps_eval(bn, X, P, z, ridge, True)
            nev += 1
            if qn <= q + 1e-4 * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            converged = True  # no descent left at machine precision
            break
        s = bn - b
        yv = gn - g
        sy = s @ yv
        if sy > 1e-300:
            rho = 1.0 / sy
            Hy = H @ yv
            H = H - rho * (np.outer(s, Hy) + np.outer(Hy, s)) + (rho * rho * (yv @ Hy) + rho) * np.outer(s, s)
        small = q - qn <= 1e-15 * max(abs(q), 1e-300)
        b, q, g = bn, qn, gn
        if small and np.max(np.abs(s)) < 1e-12 * (1.0 + np.max(np.abs(b))):
            converged = True
            break
    return b, q, converged, nev


def _row_products(X) -> np.ndarray:
    ia, ib = np.tril_indices(X.shape[1])
    return np.ascontiguousarray(X[:, ia] * X[:, ib])


def fit_cbps_ps(data: Dataset, opts: GmmOptions | None = None) -> PropensityFit:
    """Overidentified covariate-balancing propensity score.

    Logit model whose coefficients minimize the continuously-updated GMM
    criterion for the stacked logit score and balancing moments, weighted by
    their model-implied variance (:func:`cbps_weighting`) and started at the
    logit maximum likelihood estimate. The criterion has a closed-form
    gradient here, so the search is quasi-Newton (restarted once) rather
    than the generic simplex of :func:`minimize_cue_gmm`.
    """
    opts = opts or GmmOptions()
    X = _design(data)
    z = np.asarray(data.z, dtype=float)
    init = fit_binary_glm(X, z, "logit").coefficients
    if not np.isfinite(cbps_objective(init, X, z, opts.ridge)):
        raise NonFiniteObjective("CBPS criterion is not finite at the logit start")
    X = np.ascontiguousarray(X)
    P = _row_products(X)
    ridge = float(opts.ridge)
    q0 = _cbps_cue(init, X, P, z, ridge)
    b, q, conv, nev = init, q0, False, 1
    for _ in range(1 + opts.restarts):
        b_new, q_new, conv, k = _cbps_bfgs(b, X, P, z, ridge, opts.gtol, 200 * init.size)
        nev += k
        if np.isfinite(q_new) and q_new <= q:
            b, q = b_new, q_new
        if conv:
            break
    gmm = GmmFit(b, float(q), bool(conv), int(nev))
    return PropensityFit(clamp(special.expit(X @ gmm.coefficients)), CBPS, gmm)


def fit_kernel_ps(data: Dataset, grid=DEFAULT_GRID) -> PropensityFit:
    """Local-constant kernel regression of the instrument on the covariates (LSCV bandwidth)."""
    if data.k == 0:
        return PropensityFit(np.full(data.n, clamp(data.z.mean())), KERNEL, None)
    model, fitted = fit_in_sample(data.x, data.z, LOCAL_CONSTANT, grid)
    return PropensityFit(clamp(fitted), KERNEL, model)


def fit_propensity(data: Dataset, method: str, **kwargs) -> PropensityFit:
    if method == PROBIT:
        return fit_probit_ps(data)
    if method == CBPS:
        return fit_cbps_ps(data, **kwargs)
    if method in (KERNEL, "lc"):
        return fit_kernel_ps(data, **kwargs)
    raise ValueError(f"unknown propensity method {method!r}")
