"""Nonparametric bootstrap standard errors and confidence intervals."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from .dataset import Dataset
from .errors import TooManyFailures
from .estimators import ESTIMATION_FAILURES, EstimatorSpec, estimate_many

__all__ = [
    "BootstrapResult",
    "DEFAULT_B",
    "MAX_FAILURE_SHARE",
    "resample_indices",
    "bootstrap_se",
    "bootstrap_many",
    "bootstrap_statistic",
    "confidence_interval",
    "percentile_interval",
    "sample_sd",
]

DEFAULT_B = 199
MAX_FAILURE_SHARE = 0.25


@dataclass(frozen=True)
class BootstrapResult:
    se: float
    replicate_estimates: np.ndarray
    n_failed: int
    B: int

    @property
    def n_ok(self) -> int:
        return self.B - self.n_failed


def resample_indices(n: int, seed: int, b: int) -> np.ndarray:
    """Row indices of bootstrap draw ``b``; depends only on ``(seed, b, n)``."""
    rng = np.random.default_rng([int(seed) % (1 << 63), int(b)])
    return rng.integers(0, n, size=n)


def sample_sd(values) -> float:
    """Standard deviation with ``B - 1`` in the denominator; exactly 0 for identical values."""
    v = np.asarray(values, dtype=float)
    if v.size < 2 or np.all(v == v[0]):
        return 0.0
    return float(np.std(v, ddof=1))


def _result(values, n_failed, B, label) -> BootstrapResult:
    if n_failed > MAX_FAILURE_SHARE * B:
        raise TooManyFailures(f"{label}: {n_failed} of {B} bootstrap draws failed")
    v = np.asarray(values, dtype=float)
    v.setflags(write=False)
    return BootstrapResult(sample_sd(v), v, int(n_failed), int(B))


def _draw(specs, data: Dataset, seed: int, b: int) -> dict:
    idx = resample_indices(data.n, seed, b)
    try:
        sample = data.take(idx)
    except ESTIMATION_FAILURES + (ValueError,) as exc:
        return {s.name: exc for s in specs}
    return {k: (v.theta if not isinstance(v, BaseException) else v)
            for k, v in estimate_many(specs, sample).items()}


def _draw_chunk(args):
    specs, data, seed, bs = args
    return [_draw(specs, data, seed, b) for b in bs]


def _resolve_workers(workers: int | None) -> int:
    if workers is None:
        workers = int(os.environ.get("LATE_LAB_THREADS", "1") or 1)
    return max(1, int(workers))


def bootstrap_many(specs: Sequence[EstimatorSpec | str], data: Dataset, B: int = DEFAULT_B, seed: int = 0,
                   workers: int | None = None) -> dict:
    """Bootstrap several estimators on the same resamples.

    Each draw resamples ``n`` rows with replacement and reruns the complete
    pipeline (trimming, propensity fits, matching) for every estimator; the
    fits shared by several estimators are computed once per draw.

    Returns
    -------
    dict
        Estimator name to :class:`BootstrapResult`, or to the
        :class:`TooManyFailures` error when more than a quarter of the
        draws failed for that estimator.
    """
    if B < 2:
        raise ValueError("B must be at least 2")
    specs = [EstimatorSpec(s) if isinstance(s, str) else s for s in specs]
    workers = _resolve_workers(workers)
    if workers == 1:
        draws = [_draw(specs, data, seed, b) for b in range(B)]
    else:
        chunks = [list(range(B))[i::workers] for i in range(workers)]
        draws = [None] * B
        with ProcessPoolExecutor(max_workers=workers) as ex:
            for bs, res in zip(chunks, ex.map(_draw_chunk, [(specs, data, seed, c) for c in chunks])):
                for b, r in zip(bs, res):
                    draws[b] = r
    out = {}
    for spec in specs:
        vals = [d[spec.name] for d in draws]
        ok = [v for v in vals if not isinstance(v, BaseException)]
        try:
            out[spec.name] = _result(ok, B - len(ok), B, spec.name)
        except TooManyFailures as exc:
            out[spec.name] = exc
    return out


def bootstrap_se(spec: EstimatorSpec | str, data: Dataset, B: int = DEFAULT_B, seed: int = 0,
                 workers: int | None = None) -> BootstrapResult:
    """Bootstrap standard error of one estimator.

    Raises
    ------
    TooManyFailures
        If more than 25% of the draws raised an estimation error.
    """
    spec = EstimatorSpec(spec) if isinstance(spec, str) else spec
    res = bootstrap_many([spec], data, B, seed, workers)[spec.name]
    if isinstance(res, BaseException):
        raise res
    return res


def bootstrap_statistic(fn, data: Dataset, B: int = DEFAULT_B, seed: int = 0) -> BootstrapResult:
    """Bootstrap an arbitrary statistic ``fn(Dataset) -> float`` on the same resample streams."""
    if B < 2:
        raise ValueError("B must be at least 2")
    vals, failed = [], 0
    for b in range(B):
        try:
            vals.append(float(fn(data.take(resample_indices(data.n, seed, b)))))
        except ESTIMATION_FAILURES:
            failed += 1
    return _result(vals, failed, B, getattr(fn, "__name__", "statistic"))


def confidence_interval(theta: float, se: float, level: float = 95.0) -> tuple[float, float]:
    """Normal-approximation interval ``theta +/- z * se``."""
    if se < 0:
        raise ValueError("se must be nonnegative")
    if not 0.0 < level < 100.0:
        raise ValueError("level must be in (0, 100)")
    q = float(stats.norm.ppf(0.5 + level / 200.0))
    return theta - q * se, theta + q * se


def percentile_interval(replicates, level: float = 95.0) -> tuple[float, float]:
    """Percentile bootstrap interval from the replicate estimates."""
    r = np.asarray(replicates, dtype=float)
    if r.size == 0:
        raise ValueError("no replicate estimates")
    a = (100.0 - level) / 2.0
    lo, hi = np.percentile(r, [a, 100.0 - a])
    return float(lo), float(hi)
