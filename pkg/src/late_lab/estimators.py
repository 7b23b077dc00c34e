"""The LATE estimator registry: weighting, doubly robust, matching, regression, forest and kernel estimators.

Every estimator is a Wald ratio of an outcome contrast over a treatment
contrast across instrument arms. All except ``means`` first drop
observations whose normalized inverse-probability weight share, computed
from a local-constant kernel propensity score, exceeds ``t`` percent.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .condmean import fit_arm_mean, is_binary
from .dataset import Dataset
from .errors import AllTrimmed, LateLabError, MissingColumn, SeparationWarning, WeakFirstStage
from .forest import ForestParams, fit_forest, predict_forest
from .matching import (
    NORMALIZED_EUCLIDEAN,
    PROPENSITY_GAP,
    bias_correct,
    matched_contrasts,
    pair_match,
    radius_match,
    wald_numerator,
)
from .nonparam import DEFAULT_GRID, LOCAL_CONSTANT, LOCAL_LINEAR, fit_in_sample, predict_many
from .numopt import add_intercept
from .propensity import CBPS, KERNEL, PROBIT, PropensityFit, fit_kernel_ps, fit_propensity

__all__ = [
    "ESTIMATORS",
    "EstimatorSpec",
    "LateEstimate",
    "EstimationContext",
    "compute_trim_mask",
    "trim_mask_from_scores",
    "weight_shares",
    "estimate",
    "estimate_many",
    "WEAK_FIRST_STAGE",
    "ESTIMATION_FAILURES",
]

ESTIMATORS = (
    "ipw^probit", "ipw^cbps", "ipw^lc",
    "dr^probit", "dr^cbps", "dr^lc",
    "pairmatch^probit", "pairmatch^cbps", "pairmatch^lc", "pairmatch^x",
    "radmatch^probit", "radmatch^cbps", "radmatch^lc",
    "radmatchx^probit", "radmatchx^cbps", "radmatchx^lc",
    "reg", "tsls", "randforest", "reg^kernel", "means",
)

WEAK_FIRST_STAGE = 1e-10

# errors that mark one estimate as failed without aborting a batch
ESTIMATION_FAILURES = (LateLabError, np.linalg.LinAlgError, FloatingPointError)
DEFAULT_TRIM = 5.0

_BACKENDS = {"probit": PROBIT, "cbps": CBPS, "lc": KERNEL}


@dataclass(frozen=True)
class EstimatorSpec:
    """An estimator name from :data:`ESTIMATORS` plus its tuning knobs.

    Parameters
    ----------
    trim_threshold : float
        Percent ``t`` of the trimming rule, in (0, 100].
    trim_all : bool
        Also trim before ``means`` (which otherwise uses the raw sample).
    radius_multiplier : float
        Radius as a multiple of the largest pair-matching distance.
    extra_covariate : str, optional
        Covariate appended to the score for ``radmatchx``; defaults to the
        first covariate column.
    forest : ForestParams
    bandwidth_grid : tuple of float
        LSCV scale factors for every kernel fit.
    seed : int
        Seed for the random forest.
    """

    name: str
    trim_threshold: float = DEFAULT_TRIM
    trim_all: bool = False
    radius_multiplier: float = 3.0
    extra_covariate: str | None = None
    forest: ForestParams = field(default_factory=ForestParams)
    bandwidth_grid: tuple = DEFAULT_GRID
    seed: int = 0

    def __post_init__(self):
        if self.name not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.name!r}; valid names: {', '.join(ESTIMATORS)}")
        if not 0.0 < self.trim_threshold <= 100.0:
            raise ValueError("trim_threshold must lie in (0, 100]")

    @property
    def family(self) -> str:
        return self.name.split("^")[0]

    @property
    def backend(self) -> str | None:
        parts = self.name.split("^")
        return _BACKENDS.get(parts[1]) if len(parts) == 2 else None

    @property
    def trims(self) -> bool:
        return self.name != "means" or self.trim_all


@dataclass(frozen=True)
class LateEstimate:
    theta: float
    first_stage: float
    n_trimmed: int
    n_used: int
    diagnostics: dict = field(default_factory=dict)

    @property
    def reduced_form(self) -> float:
        return self.theta * self.first_stage


# --------------------------------------------------------------------------- trimming


def weight_shares(z, scores) -> np.ndarray:
    """Each observation's share of its arm's total inverse-probability weight."""
    z = np.asarray(z, dtype=float)
    p = np.asarray(scores, dtype=float)
    w1 = z / p
    w0 = (1.0 - z) / (1.0 - p)
    s1, s0 = w1.sum(), w0.sum()
    return (w1 / s1 if s1 > 0 else w1) + (w0 / s0 if s0 > 0 else w0)


def trim_mask_from_scores(z, scores, t: float) -> np.ndarray:
    """Boolean mask of observations to drop: weight share above ``t`` percent."""
    return weight_shares(z, scores) > t / 100.0


def compute_trim_mask(data: Dataset, t: float = DEFAULT_TRIM, scores: PropensityFit | None = None,
                      grid=DEFAULT_GRID) -> np.ndarray:
    """Observations to drop under the weight-share rule.

    Shares come from a local-constant kernel propensity score of ``z`` on
    ``x`` (fitted here unless ``scores`` is given). A single pass is made:
    shares are not recomputed after dropping.

    Raises
    ------
    AllTrimmed
        If an instrument arm would be left empty.
    """
    if scores is None:
        scores = fit_kernel_ps(data, grid)
    drop = trim_mask_from_scores(data.z, scores.scores, t)
    kept_z = data.z[~drop]
    if kept_z.size == 0 or kept_z.sum() == 0 or kept_z.sum() == kept_z.size:
        raise AllTrimmed("trimming leaves an instrument arm empty")
    return drop


# --------------------------------------------------------------------------- shared context


def _drop_constant_columns(data: Dataset) -> Dataset:
    if data.k == 0:
        return data
    keep = np.flatnonzero(data.x.max(axis=0) > data.x.min(axis=0))
    return data if keep.size == data.k else data.select_columns(keep)


class EstimationContext:
    """Per-sample cache of fits that several estimators share.

    The trimming mask, the three propensity fits and the arm-specific
    conditional mean predictions are computed once and reused by every
    estimator evaluated on the same sample.
    """

    def __init__(self, data: Dataset, trim_threshold: float = DEFAULT_TRIM, grid=DEFAULT_GRID):
        self.raw = data
        self.t = trim_threshold
        self.grid = tuple(grid)
        self._drop = None
        self._trimmed = None
        self._cache: dict = {}

    # trimming -------------------------------------------------------------
    @property
    def drop(self) -> np.ndarray:
        if self._drop is None:
            self._drop = compute_trim_mask(self.raw, self.t, grid=self.grid)
        return self._drop

    def sample(self, trimmed: bool) -> Dataset:
        if not trimmed:
            return self.raw
        if self._trimmed is None:
            drop = self.drop
            data = self.raw if not drop.any() else self.raw.take(np.flatnonzero(~drop))
            self._trimmed = _drop_constant_columns(data)
        return self._trimmed

    def cached(self, key, fn: Callable):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    # shared fits on the trimmed sample ------------------------------------
    def propensity(self, backend: str) -> PropensityFit:
        data = self.sample(True)
        kwargs = {"grid": self.grid} if backend == KERNEL else {}
        return self.cached(("ps", backend), lambda: fit_propensity(data, backend, **kwargs))

    def parametric_means(self, target: str) -> tuple[np.ndarray, np.ndarray]:
        """OLS/probit predictions of ``E[t | z, x]`` for z = 1, 0 at every retained row."""
        data = self.sample(True)

        def fit():
            t = data.y if target == "y" else data.d
            binary = True if target == "d" else is_binary(t)
            out = []
            for arm in (1.0, 0.0):
                rows = data.z == arm
                out.append(fit_arm_mean(data.x[rows], t[rows], binary).predict(data.x))
            return tuple(out)

        return self.cached(("reg", target), fit)

    def kernel_means(self, target: str) -> tuple[np.ndarray, np.ndarray]:
        """Kernel regression predictions of ``E[t | z, x]`` for z = 1, 0 at every retained row."""
        data = self.sample(True)

        def fit():
            t = data.y if target == "y" else data.d
            mode = LOCAL_CONSTANT if (target == "d" or is_binary(t)) else LOCAL_LINEAR
            out = []
            for arm in (1.0, 0.0):
                rows = data.z == arm
                out.append(_kernel_fit_predict(data.x[rows], t[rows], data.x, mode, self.grid))
            return tuple(out)

        return self.cached(("np", target), fit)

    def forest_means(self, target: str, params: ForestParams, seed: int):
        data = self.sample(True)

        def fit():
            t = data.y if target == "y" else data.d
            # resamples repeat rows; predict once per distinct covariate row
            uniq, inverse = self.cached("unique_x", lambda: _unique_rows(data.x))
            out = []
            for j, arm in enumerate((1.0, 0.0)):
                rows = data.z == arm
                s = _forest_seed(seed, target, j)
                out.append(_forest_fit_predict(data.x[rows], t[rows], uniq, params, s)[inverse])
            return tuple(out)

        return self.cached(("rf", target, params, seed), fit)


def _unique_rows(x: np.ndarray):
    if x.shape[0] == 0 or x.shape[1] == 0:
        return x, np.zeros(x.shape[0], dtype=np.int64)
    uniq, inverse = np.unique(x, axis=0, return_inverse=True)
    return uniq, inverse.ravel()


def _forest_seed(seed: int, target: str, arm_index: int) -> int:
    return int(np.random.SeedSequence([int(seed) % (1 << 63), 0 if target == "y" else 1, arm_index])
               .generate_state(1, np.uint64)[0])


def _kernel_fit_predict(x_arm, t_arm, x_eval, mode, grid) -> np.ndarray:
    if np.all(t_arm == t_arm[0]):
        return np.full(x_eval.shape[0], float(t_arm[0]))
    if x_arm.shape[1] == 0:
        return np.full(x_eval.shape[0], float(np.mean(t_arm)))
    model, _ = fit_in_sample(x_arm, t_arm, mode, grid)
    return predict_many(model, x_eval)[0]


def _forest_fit_predict(x_arm, t_arm, x_eval, params, seed) -> np.ndarray:
    if np.all(t_arm == t_arm[0]):
        return np.full(x_eval.shape[0], float(t_arm[0]))
    forest = fit_forest(x_arm, t_arm, params, seed)
    xq = x_eval if x_eval.shape[1] > 0 else np.zeros((x_eval.shape[0], 1))
    return predict_forest(forest, xq)


# --------------------------------------------------------------------------- estimators


def _ratio(num: float, den: float):
    if not np.isfinite(den) or abs(den) < WEAK_FIRST_STAGE:
        raise WeakFirstStage(f"first-stage contrast {den!r} is too close to zero")
    return num / den, den


def _ipw(data: Dataset, p: np.ndarray):
    z = data.z
    w1 = z / p
    w0 = (1.0 - z) / (1.0 - p)
    w1 = w1 / w1.sum()
    w0 = w0 / w0.sum()
    num = w1 @ data.y - w0 @ data.y
    den = w1 @ data.d - w0 @ data.d
    return num, den


def _dr(data: Dataset, p, mu_y, mu_d):
    z = data.z

    def aipw(t, m1, m0):
        return float(np.mean(m1 + z * (t - m1) / p - m0 - (1.0 - z) * (t - m0) / (1.0 - p)))

    return aipw(data.y, *mu_y), aipw(data.d, *mu_d)


def _extra_column(data: Dataset, name: str | None) -> np.ndarray:
    if data.k == 0:
        raise MissingColumn("radius matching on score plus covariate needs at least one covariate")
    if name is None:
        return data.x[:, 0]
    return data.column(name)


def _matching(spec: EstimatorSpec, ctx: EstimationContext, data: Dataset):
    fam = spec.family
    if spec.name == "pairmatch^x":
        plan = pair_match(data, NORMALIZED_EUCLIDEAN)
        cy, cd = matched_contrasts(plan, data.y), matched_contrasts(plan, data.d)
        return wald_numerator(cy, data.z), wald_numerator(cd, data.z), {"max_pair_distance": plan.max_pair_distance}
    ps = ctx.propensity(spec.backend)
    if fam == "pairmatch":
        plan = pair_match(data, PROPENSITY_GAP, ps)
        cy, cd = matched_contrasts(plan, data.y), matched_contrasts(plan, data.d)
    else:
        extra = _extra_column(data, spec.extra_covariate) if fam == "radmatchx" else None
        plan = radius_match(data, ps, spec.radius_multiplier, extra=extra)
        cy = bias_correct(plan, data, "outcome")
        cd = bias_correct(plan, data, "treatment")
    diag = {"max_pair_distance": plan.max_pair_distance}
    if plan.radius is not None:
        diag["radius"] = plan.radius
    return wald_numerator(cy, data.z), wald_numerator(cd, data.z), diag


def _tsls(data: Dataset):
    """Just-identified IV: regressors (1, x, d), instruments (1, x, z)."""
    n = data.n
    W = add_intercept(data.x)
    R = np.column_stack([W, data.d])
    Q = np.column_stack([W, data.z])
    Szz = Q.T @ Q / n
    Sxz = R.T @ Q / n
    Szy = Q.T @ data.y / n
    A = Sxz @ np.linalg.solve(Szz, Sxz.T)
    b = Sxz @ np.linalg.solve(Szz, Szy)
    coef = np.linalg.solve(A, b)
    # first stage: coefficient on z in the OLS of d on (1, x, z)
    fs = np.linalg.lstsq(Q, data.d, rcond=None)[0][-1]
    return float(coef[-1]), float(fs)


def _means(data: Dataset):
    z1 = data.z == 1.0
    num = data.y[z1].mean() - data.y[~z1].mean()
    den = data.d[z1].mean() - data.d[~z1].mean()
    return float(num), float(den)


def _evaluate(spec: EstimatorSpec, ctx: EstimationContext) -> LateEstimate:
    data = ctx.sample(spec.trims)
    n_trim = ctx.raw.n - data.n
    diag: dict = {}
    name, fam = spec.name, spec.family
    if name == "means":
        num, den = _means(data)
    elif name == "tsls":
        theta, den = _tsls(data)
        if abs(den) < WEAK_FIRST_STAGE:
            raise WeakFirstStage(f"first-stage coefficient {den!r} is too close to zero")
        return LateEstimate(theta, den, n_trim, data.n, diag)
    elif fam == "ipw":
        num, den = _ipw(data, ctx.propensity(spec.backend).scores)
    elif fam == "dr":
        p = ctx.propensity(spec.backend).scores
        if spec.backend == KERNEL:
            mu_y, mu_d = ctx.kernel_means("y"), ctx.kernel_means("d")
        else:
            mu_y, mu_d = ctx.parametric_means("y"), ctx.parametric_means("d")
        num, den = _dr(data, p, mu_y, mu_d)
    elif fam in ("pairmatch", "radmatch", "radmatchx"):
        num, den, diag = _matching(spec, ctx, data)
    elif name == "reg":
        (y1, y0), (d1, d0) = ctx.parametric_means("y"), ctx.parametric_means("d")
        num, den = float(np.mean(y1 - y0)), float(np.mean(d1 - d0))
    elif name == "reg^kernel":
        (y1, y0), (d1, d0) = ctx.kernel_means("y"), ctx.kernel_means("d")
        num, den = float(np.mean(y1 - y0)), float(np.mean(d1 - d0))
    elif name == "randforest":
        (y1, y0) = ctx.forest_means("y", spec.forest, spec.seed)
        (d1, d0) = ctx.forest_means("d", spec.forest, spec.seed)
        num, den = float(np.mean(y1 - y0)), float(np.mean(d1 - d0))
    else:  # pragma: no cover - registry is closed
        raise ValueError(name)
    theta, den = _ratio(float(num), float(den))
    return LateEstimate(float(theta), float(den), n_trim, data.n, diag)


def estimate(spec: EstimatorSpec | str, data: Dataset, context: EstimationContext | None = None) -> LateEstimate:
    """Point estimate of the LATE for one registry entry.

    Raises
    ------
    WeakFirstStage
        If the treatment contrast is below 1e-10 in absolute value.
    AllTrimmed
        If trimming empties an instrument arm.
    """
    if isinstance(spec, str):
        spec = EstimatorSpec(spec)
    ctx = context or EstimationContext(data, spec.trim_threshold, spec.bandwidth_grid)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SeparationWarning)
        return _evaluate(spec, ctx)


def estimate_many(specs, data: Dataset) -> dict:
    """Evaluate several estimators on one sample, sharing trimming and nuisance fits.

    Returns a mapping from estimator name to :class:`LateEstimate` or to the
    exception that estimator raised.
    """
    specs = [EstimatorSpec(s) if isinstance(s, str) else s for s in specs]
    contexts: dict = {}
    out: dict = {}
    for spec in specs:
        key = (spec.trim_threshold, tuple(spec.bandwidth_grid))
        if key not in contexts:
            contexts[key] = EstimationContext(data, spec.trim_threshold, spec.bandwidth_grid)
        try:
            out[spec.name] = estimate(spec, data, contexts[key])
        except ESTIMATION_FAILURES as exc:
            out[spec.name] = exc
    return out
