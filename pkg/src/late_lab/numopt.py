"""Newton maximum likelihood for binary-response models and a CUE-GMM minimizer."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import special

from .errors import NonFiniteObjective, RankDeficientDesign, SeparationWarning, SingularWeighting

__all__ = [
    "GlmFit",
    "GmmFit",
    "GmmOptions",
    "add_intercept",
    "glm_loglik",
    "glm_score",
    "glm_mean",
    "fit_binary_glm",
    "cue_objective",
    "minimize_cue_gmm",
    "nelder_mead",
]

PROB_CLAMP = 1e-6


def add_intercept(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    return np.column_stack([np.ones(x.shape[0]), x])


@dataclass(frozen=True)
class GlmFit:
    coefficients: np.ndarray
    loglik: float
    converged: bool
    iterations: int
    link: str

    def predict(self, design) -> np.ndarray:
        """Fitted probabilities for rows of ``design`` (intercept column included)."""
        return glm_mean(np.asarray(design, dtype=float) @ self.coefficients, self.link)


def glm_mean(eta: np.ndarray, link: str) -> np.ndarray:
    if link == "probit":
        return special.ndtr(eta)
    if link == "logit":
        return special.expit(eta)
    raise ValueError(f"unknown link {link!r}")


def _log_cdf(t: np.ndarray, link: str) -> np.ndarray:
    if link == "probit":
        return special.log_ndtr(t)
    return -np.logaddexp(0.0, -t)


def glm_loglik(beta, design, response, link: str) -> float:
    """Bernoulli log likelihood of ``response`` at coefficients ``beta``."""
    eta = np.asarray(design) @ np.asarray(beta, dtype=float)
    q = 2.0 * np.asarray(response) - 1.0
    return float(np.sum(_log_cdf(q * eta, link)))


def _score_weights(eta, q, link):
    """Per-observation derivative of the log likelihood w.r.t. eta and minus its second derivative."""
    if link == "probit":
        qe = q * eta
        lam = q * np.exp(-0.5 * qe**2 - 0.5 * np.log(2.0 * np.pi) - special.log_ndtr(qe))
        return lam, lam * (lam + eta)
    p = special.expit(eta)
    y = 0.5 * (q + 1.0)
    return y - p, p * (1.0 - p)


def glm_score(beta, design, response, link: str) -> np.ndarray:
    design = np.asarray(design, dtype=float)
    eta = design @ np.asarray(beta, dtype=float)
    q = 2.0 * np.asarray(response, dtype=float) - 1.0
    g, _ = _score_weights(eta, q, link)
    return design.T @ g


def fit_binary_glm(design, response, link: str = "probit", *, gtol: float = 1e-8,
                   max_iter: int = 100, init=None) -> GlmFit:
    """Maximum likelihood for a probit or logit model by Newton-Raphson.

    Each Newton step is halved (up to 30 times) until the log likelihood does
    not decrease. Iteration stops once the largest absolute score component
    drops below ``gtol``.

    Parameters
    ----------
    design : ndarray, shape (n, p)
        Regressors including the intercept column.
    response : ndarray, shape (n,)
        0/1 outcomes.
    link : {"probit", "logit"}

    Returns
    -------
    GlmFit
        ``converged`` is False when the iteration limit was hit, the
        coefficients diverged past 1e3 or every observation is predicted
        perfectly (a :class:`SeparationWarning` is issued in the last two
        cases).

    Raises
    ------
    RankDeficientDesign
        If ``design`` does not have full column rank.
    """
    if link not in ("probit", "logit"):
        raise ValueError(f"unknown link {link!r}")
    X = np.asarray(design, dtype=float)
    y = np.asarray(response, dtype=float)
    n, p = X.shape
    if n < p or np.linalg.matrix_rank(X) < p:
        raise RankDeficientDesign(f"design with {p} columns has rank below {p}")
    q = 2.0 * y - 1.0
    beta = np.zeros(p) if init is None else np.array(init, dtype=float)
    ll = glm_loglik(beta, X, y, link)
    converged = False
    separated = False
    it = 0
    for it in range(1, max_iter + 1):
        eta = X @ beta
        g, w = _score_weights(eta, q, link)
        grad = X.T @ g
        if np.max(np.abs(grad)) < gtol:
            converged = True
            it -= 1
            break
        hess = (X * w[:, None]).T @ X
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        # near the optimum the likelihood change drowns in rounding error
        slack = 64.0 * np.finfo(float).eps * (1.0 + abs(ll))
        t = 1.0
        for _ in range(31):
            cand = beta + t * step
            ll_cand = glm_loglik(cand, X, y, link)
            if np.isfinite(ll_cand) and ll_cand >= ll - slack:
                break
            t *= 0.5
        else:
            break
        improved = ll_cand > ll
        beta, ll = cand, ll_cand
        if np.max(np.abs(beta)) > 1e3 and improved:
            separated = True
            break
    else:
        eta = X @ beta
        g, _ = _score_weights(eta, q, link)
        converged = bool(np.max(np.abs(X.T @ g)) < gtol)
    # complete separation: the score vanishes numerically before |beta| reaches 1e3
    if ll > -1e-6:
        separated = True
    if separated:
        warnings.warn("coefficients diverging with improving likelihood; possible separation",
                      SeparationWarning, stacklevel=2)
    return GlmFit(beta, ll, converged and not separated, it, link)


@dataclass(frozen=True)
class GmmFit:
    coefficients: np.ndarray
    objective: float
    converged: bool
    evaluations: int = 0


@dataclass(frozen=True)
class GmmOptions:
    xtol: float = 1e-7
    iter_per_dim: int = 500
    ridge: float = 1e-8
    restarts: int = 1
    step: float = 0.05
    zero_step: float = 0.00025
    objective_floor: float = 1e-14
    gtol: float = 1e-9


def cue_objective(moments: np.ndarray, ridge: float = 1e-8) -> float:
    """``gbar' (S + ridge*I)^-1 gbar`` with ``S`` the centered covariance of the moment rows."""
    g = np.asarray(moments, dtype=float)
    if not np.all(np.isfinite(g)):
        raise NonFiniteObjective("moment matrix has non-finite entries")
    n, m = g.shape
    gbar = g.mean(axis=0)
    c = g - gbar
    S = c.T @ c / n
    S[np.diag_indices(m)] += ridge
    try:
        sol = np.linalg.solve(S, gbar)
    except np.linalg.LinAlgError:
        raise SingularWeighting("moment covariance is singular") from None
    val = float(gbar @ sol)
    if not np.isfinite(val):
        raise SingularWeighting("moment covariance is numerically singular")
    return val


def nelder_mead(f: Callable[[np.ndarray], float], x0, *, xtol=1e-7, max_iter=None,
                step=0.05, zero_step=0.00025, floor=-np.inf):
    """Downhill simplex minimization.

    Returns ``(x_best, f_best, converged, n_evals)``. Convergence is declared
    when the simplex diameter (max-norm) falls below ``xtol`` or the best value
    is at or below ``floor``.
    """
    x0 = np.asarray(x0, dtype=float)
    dim = x0.size
    max_iter = 500 * dim if max_iter is None else max_iter
    sim = np.tile(x0, (dim + 1, 1))
    for j in range(dim):
        sim[j + 1, j] += step * x0[j] if x0[j] != 0 else zero_step
    fs = np.array([f(v) for v in sim])
    nev = dim + 1
    converged = False
    for _ in range(max_iter):
        order = np.argsort(fs, kind="stable")
        sim, fs = sim[order], fs[order]
        if fs[0] <= floor or np.max(np.abs(sim[1:] - sim[0])) < xtol:
            converged = True
            break
        centroid = sim[:-1].mean(axis=0)
        xr = centroid + (centroid - sim[-1])
        fr = f(xr)
        nev += 1
        if fr < fs[0]:
            xe = centroid + 2.0 * (centroid - sim[-1])
            fe = f(xe)
            nev += 1
            if fe < fr:
                sim[-1], fs[-1] = xe, fe
            else:
                sim[-1], fs[-1] = xr, fr
            continue
        if fr < fs[-2]:
            sim[-1], fs[-1] = xr, fr
            continue
        if fr < fs[-1]:
            xc = centroid + 0.5 * (xr - centroid)
            fc = f(xc)
            nev += 1
            if fc <= fr:
                sim[-1], fs[-1] = xc, fc
                continue
        else:
            xc = centroid + 0.5 * (sim[-1] - centroid)
            fc = f(xc)
            nev += 1
            if fc < fs[-1]:
                sim[-1], fs[-1] = xc, fc
                continue
        sim[1:] = sim[0] + 0.5 * (sim[1:] - sim[0])
        fs[1:] = [f(v) for v in sim[1:]]
        nev += dim
    else:
        order = np.argsort(fs, kind="stable")
        sim, fs = sim[order], fs[order]
    return sim[0].copy(), float(fs[0]), converged, nev


def minimize_cue_gmm(moment_fn: Callable[[np.ndarray], np.ndarray], init,
                     opts: GmmOptions | None = None, *,
                     criterion: Callable[[np.ndarray], float] | None = None) -> GmmFit:
    """Continuously-updated GMM by derivative-free simplex search.

    Minimizes ``Q(b) = gbar(b)' S(b)^-1 gbar(b)`` where ``moment_fn(b)`` returns
    the ``n x m`` matrix of per-observation moments and ``S(b)`` is their
    centered sample covariance plus a small ridge. The search starts from
    ``init`` and is restarted once from the best vertex.

    ``criterion`` may supply a faster evaluation of the same ``Q(b)``
    (returning ``inf`` where it is undefined); ``moment_fn`` is then only
    used to validate the start value.

    Raises
    ------
    NonFiniteObjective, SingularWeighting
        If the criterion cannot be evaluated at ``init``.
    """
    opts = opts or GmmOptions()
    init = np.atleast_1d(np.asarray(init, dtype=float))
    g0 = np.asarray(moment_fn(init), dtype=float)
    if g0.ndim != 2 or g0.shape[1] < init.size:
        raise ValueError("moment_fn must return an n x m matrix with m >= len(init)")
    q0 = cue_objective(g0, opts.ridge)

    def crit(b):
        if criterion is not None:
            v = criterion(b)
            return v if np.isfinite(v) else np.inf
        try:
            v = cue_objective(moment_fn(b), opts.ridge)
        except (NonFiniteObjective, SingularWeighting):
            return np.inf
        return v if np.isfinite(v) else np.inf

    x, fx, conv, nev = init, q0, False, 1
    for _ in range(1 + opts.restarts):
        x_new, f_new, conv, k = nelder_mead(crit, x, xtol=opts.xtol,
                                            max_iter=opts.iter_per_dim * init.size,
                                            step=opts.step, zero_step=opts.zero_step,
                                            floor=opts.objective_floor)
        nev += k
        if f_new <= fx:
            x, fx = x_new, f_new
        if fx <= opts.objective_floor:
            break
    return GmmFit(np.asarray(x), float(fx), bool(conv), nev)
