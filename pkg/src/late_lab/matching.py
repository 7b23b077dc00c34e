"""Pair matching with replacement and distance-weighted radius matching across instrument arms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .condmean import fit_arm_mean, is_binary
from .dataset import Dataset
from .errors import ZeroVarianceCovariate

__all__ = [
    "PROPENSITY_GAP",
    "NORMALIZED_EUCLIDEAN",
    "PROPENSITY_COVARIATE",
    "MatchPlan",
    "pair_match",
    "radius_match",
    "bias_correct",
    "matched_contrasts",
    "wald_numerator",
    "EPS",
]

PROPENSITY_GAP = "propensity_gap"
NORMALIZED_EUCLIDEAN = "normalized_euclidean"
PROPENSITY_COVARIATE = "propensity_covariate"
EPS = 1e-12


@dataclass(frozen=True)
class MatchPlan:
    """Matches for every observation, stored in compressed-row form.

    The matches of reference ``i`` are ``indices[ptr[i]:ptr[i + 1]]`` with
    weights ``weights[ptr[i]:ptr[i + 1]]``; indices are ascending and belong
    to the arm opposite to ``i``.
    """

    ptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray
    distance_metric: str
    max_pair_distance: float
    radius: float | None = None

    @property
    def n(self) -> int:
        return self.ptr.size - 1

    def matches(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        a, b = self.ptr[i], self.ptr[i + 1]
        return self.indices[a:b], self.weights[a:b]

    def imputed(self, t) -> np.ndarray:
        """``sum_j w_ij t_j`` for every reference ``i``."""
        t = np.asarray(t, dtype=float)
        return np.add.reduceat(self.weights * t[self.indices], self.ptr[:-1])


def _coordinates(data: Dataset, metric: str, scores=None, extra=None) -> np.ndarray:
    """Rows of the space in which the metric is plain Euclidean distance."""
    if metric == PROPENSITY_GAP:
        if scores is None:
            raise ValueError("propensity-gap matching needs scores")
        return np.asarray(getattr(scores, "scores", scores), dtype=float).reshape(-1, 1)
    if metric == NORMALIZED_EUCLIDEAN:
        x = data.x
        sd = x.std(axis=0, ddof=1)
        if np.any(sd == 0.0):
            raise ZeroVarianceCovariate("normalized Euclidean distance needs non-constant covariates")
        return x / sd
    if metric == PROPENSITY_COVARIATE:
        if scores is None or extra is None:
            raise ValueError("propensity-plus-covariate matching needs scores and a covariate")
        p = np.asarray(getattr(scores, "scores", scores), dtype=float)
        c = np.asarray(extra, dtype=float).ravel()
        sd = c.std(ddof=1)
        if sd == 0.0:
            raise ZeroVarianceCovariate("extra matching covariate is constant")
        return np.column_stack([p, c / sd])
    raise ValueError(f"unknown distance metric {metric!r}")


def _distances(coords: np.ndarray, ref: np.ndarray, pool: np.ndarray) -> np.ndarray:
    diff = coords[ref][:, None, :] - coords[pool][None, :, :]
    if coords.shape[1] == 1:
        return np.abs(diff[:, :, 0])
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def _arm_distances(data: Dataset, coords: np.ndarray):
    """Distance blocks ``(refs, pool, D)`` for both matching directions."""
    arm1 = np.flatnonzero(data.z == 1.0)
    arm0 = np.flatnonzero(data.z == 0.0)
    return [(arm1, arm0, _distances(coords, arm1, arm0)), (arm0, arm1, _distances(coords, arm0, arm1))]


def _assemble(n, per_ref, metric, max_pair, radius) -> MatchPlan:
    counts = np.zeros(n, dtype=np.int64)
    for i, (idx, _) in per_ref.items():
        counts[i] = idx.size
    ptr = np.concatenate([[0], np.cumsum(counts)])
    indices = np.empty(ptr[-1], dtype=np.int64)
    weights = np.empty(ptr[-1])
    for i, (idx, w) in per_ref.items():
        indices[ptr[i]:ptr[i + 1]] = idx
        weights[ptr[i]:ptr[i + 1]] = w
    for a in (ptr, indices, weights):
        a.setflags(write=False)
    return MatchPlan(ptr, indices, weights, metric, float(max_pair), radius)


def _pair(blocks):
    per_ref = {}
    max_pair = 0.0
    for refs, pool, D in blocks:
        # argmin returns the first minimum, i.e. the lowest pool index
        best = np.argmin(D, axis=1)
        dist = D[np.arange(refs.size), best]
        max_pair = max(max_pair, float(dist.max()))
        for r, b in zip(refs, best):
            per_ref[int(r)] = (np.array([pool[b]]), np.array([1.0]))
    return per_ref, max_pair


def pair_match(data: Dataset, distance: str = PROPENSITY_GAP, scores=None, extra=None) -> MatchPlan:
    """Nearest opposite-arm neighbour of every observation (with replacement).

    Parameters
    ----------
    distance : {"propensity_gap", "normalized_euclidean", "propensity_covariate"}
        Absolute propensity-score gap, Euclidean distance on covariates
        scaled by their standard deviations, or Euclidean distance on
        ``(score, extra / sd(extra))``.
    scores : PropensityFit or array, optional
        Required for the propensity-based metrics.
    extra : array, optional
        Additional matching covariate for ``propensity_covariate``.

    Ties go to the lowest row index.
    """
    coords = _coordinates(data, distance, scores, extra)
    per_ref, max_pair = _pair(_arm_distances(data, coords))
    return _assemble(data.n, per_ref, distance, max_pair, None)


def radius_match(data: Dataset, scores, radius_multiplier: float = 3.0, extra=None) -> MatchPlan:
    """Inverse-distance weighted matching within a radius.

    The radius is ``radius_multiplier`` times the largest pair-matching
    distance (pooled over both directions). Every opposite-arm unit within
    the radius gets weight proportional to ``1 / (distance + 1e-12)``;
    references with no unit inside fall back to their pair match. With
    ``extra`` given, distances are computed on ``(score, extra / sd(extra))``.
    """
    if radius_multiplier < 0:
        raise ValueError("radius_multiplier must be nonnegative")
    metric = PROPENSITY_GAP if extra is None else PROPENSITY_COVARIATE
    coords = _coordinates(data, metric, scores, extra)
    blocks = _arm_distances(data, coords)
    pairs, max_pair = _pair(blocks)
    radius = radius_multiplier * max_pair
    per_ref = {}
    for refs, pool, D in blocks:
        inside = D <= radius
        for row, r in enumerate(refs):
            sel = np.flatnonzero(inside[row])
            if sel.size == 0:
                per_ref[int(r)] = pairs[int(r)]
                continue
            w = 1.0 / (D[row, sel] + EPS)
            per_ref[int(r)] = (pool[sel], w / w.sum())
    return _assemble(data.n, per_ref, metric, max_pair, radius)


def matched_contrasts(plan: MatchPlan, t) -> np.ndarray:
    """``t_i - sum_j w_ij t_j`` for every reference (no bias correction)."""
    t = np.asarray(t, dtype=float)
    return t - plan.imputed(t)


def bias_correct(plan: MatchPlan, data: Dataset, target: str = "outcome", values=None) -> np.ndarray:
    """Regression-adjusted matched contrasts.

    For reference ``i`` the contrast is
    ``(t_i - sum_j w_ij t_j) - (m(x_i) - sum_j w_ij m(x_j))`` where ``m`` is
    fitted on the arm that supplies ``i``'s matches: OLS for a continuous
    target, probit for a binary one.

    Parameters
    ----------
    target : {"outcome", "treatment"}
        Which variable of ``data`` to contrast; ``values`` overrides it.
    """
    if values is None:
        if target == "outcome":
            values = data.y
        elif target == "treatment":
            values = data.d
        else:
            raise ValueError(f"unknown target {target!r}")
    t = np.asarray(values, dtype=float)
    binary = is_binary(t)
    adj = np.empty(data.n)
    for arm in (0.0, 1.0):
        pool = data.z == arm
        model = fit_arm_mean(data.x[pool], t[pool], binary)
        adj_arm = model.predict(data.x)
        refs = ~pool
        adj[refs] = adj_arm[refs] - plan.imputed(adj_arm)[refs]
    return matched_contrasts(plan, t) - adj


def wald_numerator(contrasts, z) -> float:
    """Combine per-reference contrasts of both directions into one arm difference.

    z=1 references contribute ``t_i - imputed t_i(0)`` and z=0 references
    ``imputed t_i(1) - t_i``; the sum is divided by ``n``.
    """
    c = np.asarray(contrasts, dtype=float)
    z = np.asarray(z, dtype=float)
    return float((np.sum(c[z == 1.0]) - np.sum(c[z == 0.0])) / c.size)
