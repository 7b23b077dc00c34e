"""Arm-specific conditional mean models: OLS for continuous targets, probit for binary ones."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import RankDeficientDesign
from .numopt import add_intercept, fit_binary_glm, glm_mean

__all__ = ["ArmMean", "fit_arm_mean", "is_binary"]


def is_binary(t) -> bool:
    t = np.asarray(t)
    return bool(np.all((t == 0.0) | (t == 1.0)))


@dataclass(frozen=True)
class ArmMean:
    """Linear-index model ``m(x) = g(a + x'b)`` with ``g`` identity or the normal cdf."""

    coefficients: np.ndarray
    kind: str  # "constant", "ols" or "probit"

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if self.kind == "constant":
            return np.full(x.shape[0], float(self.coefficients[0]))
        eta = add_intercept(x) @ self.coefficients
        return glm_mean(eta, "probit") if self.kind == "probit" else eta


def fit_arm_mean(x, t, binary: bool | None = None) -> ArmMean:
    """Regress ``t`` on an intercept and ``x``.

    A constant ``t`` gives a constant model without fitting. Binary targets
    (detected automatically unless ``binary`` is given) use probit maximum
    likelihood, everything else ordinary least squares.

    Raises
    ------
    RankDeficientDesign
        If ``[1, x]`` does not have full column rank.
    """
    t = np.asarray(t, dtype=float).ravel()
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    if t.size == 0:
        raise RankDeficientDesign("empty regression sample")
    if np.all(t == t[0]):
        return ArmMean(np.array([t[0]]), "constant")
    X = add_intercept(x)
    if binary is None:
        binary = is_binary(t)
    if binary:
        fit = fit_binary_glm(X, t, "probit")
        return ArmMean(fit.coefficients, "probit")
    if X.shape[0] < X.shape[1] or np.linalg.matrix_rank(X) < X.shape[1]:
        raise RankDeficientDesign(f"design with {X.shape[1]} columns has rank below {X.shape[1]}")
    beta = np.linalg.lstsq(X, t, rcond=None)[0]
    return ArmMean(beta, "ols")
