"""Replication loop, per-estimator metrics and the CSV artifacts of a simulation run."""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Sequence

import numpy as np
from scipy import stats

from ..errors import TooManyFailures
from ..estimators import ESTIMATION_FAILURES, EstimatorSpec, estimate_many
from ..forest import ForestParams
from ..inference import DEFAULT_B, bootstrap_many, confidence_interval, percentile_interval
from ..nonparam import DEFAULT_GRID
from .designs import DgpSpec
from .population import BasePopulation, DesignConfig, Population, build_population, synth_base_population

__all__ = [
    "SimulationSettings",
    "ReplicationRecord",
    "MetricsRow",
    "SimulationResult",
    "POINT_LIMIT",
    "SE_LIMIT",
    "REPLICATION_COLUMNS",
    "METRICS_COLUMNS",
    "run_simulation",
    "aggregate",
    "add_ranks",
    "replication_seed",
    "population_for",
    "write_replications",
    "write_metrics",
    "read_metrics",
    "read_replications",
    "replications_filename",
]

POINT_LIMIT = 1e10
SE_LIMIT = 150.0
NOMINAL = 95.0

REPLICATION_COLUMNS = ("rep", "theta", "se", "ci_lower", "ci_upper", "first_stage", "n_trimmed",
                       "bootstrap_failed", "valid_point", "valid_se", "covered", "error")
METRICS_COLUMNS = ("dgp_id", "estimator", "n_reps", "nsimp", "nsimse", "true_late", "coverage",
                   "interval_length", "abs_bias", "sd", "rmse", "se_bias", "rank_coverage",
                   "rank_interval_length", "rank_abs_bias", "rank_sd", "rank_rmse", "rank_se_bias")


@dataclass(frozen=True)
class SimulationSettings:
    """Estimator tuning and population constants shared by every replication."""

    trim_threshold: float = 5.0
    ci: str = "normal"
    level: float = 95.0
    radius_multiplier: float = 3.0
    extra_covariate: str | None = "age_first_birth"
    forest: ForestParams = field(default_factory=ForestParams)
    bandwidth_grid: tuple = DEFAULT_GRID
    base_size: int = 100_000
    design: DesignConfig = field(default_factory=DesignConfig)

    def __post_init__(self):
        if self.ci not in ("normal", "percentile"):
            raise ValueError("ci must be 'normal' or 'percentile'")

    def specs(self, names: Sequence[str], seed: int) -> list[EstimatorSpec]:
        return [EstimatorSpec(n, trim_threshold=self.trim_threshold, radius_multiplier=self.radius_multiplier,
                              extra_covariate=self.extra_covariate, forest=self.forest,
                              bandwidth_grid=tuple(self.bandwidth_grid), seed=seed) for n in names]


@dataclass(frozen=True)
class ReplicationRecord:
    rep: int
    theta: float
    se: float
    ci_lower: float
    ci_upper: float
    first_stage: float
    n_trimmed: int
    bootstrap_failed: int
    error: str = ""


@dataclass(frozen=True)
class MetricsRow:
    """Performance of one estimator on one DGP; ranks are within the DGP (1 = best)."""

    dgp_id: int
    estimator: str
    n_reps: int
    nsimp: int
    nsimse: int
    true_late: float
    coverage: float
    interval_length: float
    abs_bias: float
    sd: float
    rmse: float
    se_bias: float
    rank_coverage: float = math.nan
    rank_interval_length: float = math.nan
    rank_abs_bias: float = math.nan
    rank_sd: float = math.nan
    rank_rmse: float = math.nan
    rank_se_bias: float = math.nan


@dataclass
class SimulationResult:
    spec: DgpSpec
    seed: int
    true_late: float
    rows: list
    replications: dict

    def __iter__(self):
        return iter(self.rows)

    def __len__(self):
        return len(self.rows)

    def __getitem__(self, i):
        return self.rows[i]


# --------------------------------------------------------------------------- populations

_BASES: dict = {}
_POPULATIONS: dict = {}


def population_for(spec: DgpSpec, seed: int, settings: SimulationSettings | None = None) -> Population:
    """Population of a design, cached per (seed, base size, design constants, flags)."""
    settings = settings or SimulationSettings()
    bkey = (int(seed), settings.base_size)
    if bkey not in _BASES:
        _BASES.clear()
        _BASES[bkey] = synth_base_population(settings.base_size, seed)
    pkey = bkey + (settings.design, spec.flags)
    if pkey not in _POPULATIONS:
        if len(_POPULATIONS) > 8:
            _POPULATIONS.clear()
        _POPULATIONS[pkey] = build_population(_BASES[bkey], spec, seed, settings.design)
    return _POPULATIONS[pkey]


def replication_seed(seed: int, dgp_id: int, rep: int, stream: int = 0) -> int:
    """Integer seed for one random stream of replication ``rep``."""
    ss = np.random.SeedSequence([int(seed) % (1 << 63), int(dgp_id), int(rep), int(stream)])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


# --------------------------------------------------------------------------- replications

_WORKER: dict = {}


def _init_worker(payload):
    _WORKER.clear()
    _WORKER.update(payload)


def _one_replication(rep: int, population: Population, spec: DgpSpec, names, B, seed, settings):
    rng = np.random.default_rng(replication_seed(seed, spec.dgp_id, rep, 0))
    idx = rng.integers(0, population.n, size=spec.sample_size)
    est_seed = replication_seed(seed, spec.dgp_id, rep, 1)
    specs = settings.specs(names, est_seed)
    try:
        data = population.sample(idx)
    except ESTIMATION_FAILURES + (ValueError,) as exc:
        return {n: ReplicationRecord(rep, math.nan, math.nan, math.nan, math.nan, math.nan, 0, B,
                                     type(exc).__name__) for n in names}
    points = estimate_many(specs, data)
    boots = bootstrap_many(specs, data, B, replication_seed(seed, spec.dgp_id, rep, 2), workers=1)
    out = {}
    for n in names:
        p, b = points[n], boots[n]
        if isinstance(p, BaseException):
            out[n] = ReplicationRecord(rep, math.nan, math.nan, math.nan, math.nan, math.nan, 0,
                                       0 if isinstance(b, BaseException) else b.n_failed, type(p).__name__)
            continue
        if isinstance(b, TooManyFailures):
            out[n] = ReplicationRecord(rep, p.theta, math.nan, math.nan, math.nan, p.first_stage, p.n_trimmed,
                                       B, type(b).__name__)
            continue
        if settings.ci == "percentile":
            lo, hi = percentile_interval(b.replicate_estimates, settings.level)
        else:
            lo, hi = confidence_interval(p.theta, b.se, settings.level)
        out[n] = ReplicationRecord(rep, p.theta, b.se, lo, hi, p.first_stage, p.n_trimmed, b.n_failed)
    return out


def _run_chunk(reps):
    w = _WORKER
    return [_one_replication(r, w["population"], w["spec"], w["names"], w["B"], w["seed"], w["settings"])
            for r in reps]


def _resolve_workers(workers):
    if workers is None:
        workers = int(os.environ.get("LATE_LAB_THREADS", "1") or 1)
    return max(1, int(workers))


def run_simulation(spec: DgpSpec, estimators: Sequence[str], n_reps: int, B: int = DEFAULT_B, seed: int = 0, *,
                   settings: SimulationSettings | None = None, population: Population | None = None,
                   workers: int | None = None) -> SimulationResult:
    """Run ``n_reps`` replications of one DGP and aggregate the metrics.

    Replication ``r`` draws ``spec.sample_size`` rows with replacement from
    the population, evaluates every estimator and bootstraps them all on
    shared resamples. Its random streams derive from ``(seed, dgp_id, r)``
    only, so results do not depend on ``workers``. Estimation failures are
    recorded per replication and never stop the run.
    """
    if n_reps < 1:
        raise ValueError("n_reps must be positive")
    settings = settings or SimulationSettings()
    names = list(dict.fromkeys(estimators))
    settings.specs(names, 0)  # validates names early
    pop = population if population is not None else population_for(spec, seed, settings)
    theta0 = pop.true_late
    payload = dict(population=pop, spec=spec, names=names, B=int(B), seed=int(seed), settings=settings)
    workers = min(_resolve_workers(workers), n_reps)
    reps = list(range(n_reps))
    if workers == 1:
        _init_worker(payload)
        try:
            results = _run_chunk(reps)
        finally:
            _WORKER.clear()
    else:
        chunks = [reps[i::workers] for i in range(workers)]
        results = [None] * n_reps
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(payload,)) as ex:
            for chunk, res in zip(chunks, ex.map(_run_chunk, chunks)):
                for r, v in zip(chunk, res):
                    results[r] = v
    replications = {n: [results[r][n] for r in reps] for n in names}
    rows = [aggregate(replications[n], theta0, spec.dgp_id, n) for n in names]
    return SimulationResult(spec, int(seed), theta0, add_ranks(rows), replications)


# --------------------------------------------------------------------------- metrics


def _flags(records, true_late: float):
    theta = np.array([r.theta for r in records], dtype=float)
    se = np.array([r.se for r in records], dtype=float)
    lo = np.array([r.ci_lower for r in records], dtype=float)
    hi = np.array([r.ci_upper for r in records], dtype=float)
    with np.errstate(invalid="ignore"):
        vp = np.isfinite(theta) & (np.abs(theta) < POINT_LIMIT)
        tv = theta[vp]
        # identical estimates have zero spread; np.std can leave rounding residue
        sd = (0.0 if np.all(tv == tv[0]) else float(np.std(tv))) if tv.size else math.nan
        vs = vp & np.isfinite(se) & np.isfinite(lo) & np.isfinite(hi)
        # with zero spread the relative filter would reject every interval
        if sd > 0:
            vs &= se < SE_LIMIT * sd
        covered = vs & (lo <= true_late) & (true_late <= hi)
    return theta, se, lo, hi, vp, vs, covered, sd


def aggregate(records: Sequence[ReplicationRecord], true_late: float, dgp_id: int = 0,
              estimator: str = "") -> MetricsRow:
    """Metrics over the replications of one estimator.

    Point metrics use replications with ``|theta| < 1e10``; coverage,
    interval length and the SE bias additionally require a finite bootstrap
    SE below 150 times the Monte Carlo sd. ``sd`` divides by the number of
    valid replications, so ``rmse**2 == bias**2 + sd**2``.
    """
    theta, se, lo, hi, vp, vs, covered, sd = _flags(records, true_late)
    nan = math.nan
    if vp.any():
        bias = math.fsum(theta[vp]) / int(vp.sum()) - true_late
        rmse = float(np.sqrt(np.mean((theta[vp] - true_late) ** 2)))
    else:
        bias = rmse = nan
    if vs.any():
        coverage = 100.0 * float(np.sum(covered)) / float(np.sum(vs))
        length = float(np.mean(hi[vs] - lo[vs]))
        se_bias = float(np.median(se[vs]) - sd)
    else:
        coverage = length = se_bias = nan
    return MetricsRow(int(dgp_id), estimator, len(records), int(vp.sum()), int(vs.sum()), float(true_late),
                      coverage, length, abs(bias), sd, rmse, se_bias)


_RANK_KEYS = (
    ("rank_coverage", lambda r: abs(r.coverage - NOMINAL)),
    ("rank_interval_length", lambda r: r.interval_length),
    ("rank_abs_bias", lambda r: r.abs_bias),
    ("rank_sd", lambda r: r.sd),
    ("rank_rmse", lambda r: r.rmse),
    ("rank_se_bias", lambda r: abs(r.se_bias)),
)


def add_ranks(rows: Sequence[MetricsRow]) -> list[MetricsRow]:
    """Fill the rank fields within each DGP; ties share the lowest rank and undefined metrics rank last."""
    rows = list(rows)
    out = list(rows)
    by_dgp: dict = {}
    for i, r in enumerate(rows):
        by_dgp.setdefault(r.dgp_id, []).append(i)
    for idx in by_dgp.values():
        ranks = {}
        for name, key in _RANK_KEYS:
            v = np.array([key(rows[i]) for i in idx], dtype=float)
            v[~np.isfinite(v)] = np.inf
            ranks[name] = stats.rankdata(v, method="min")
        for j, i in enumerate(idx):
            out[i] = replace(rows[i], **{k: float(v[j]) for k, v in ranks.items()})
    return out


# --------------------------------------------------------------------------- CSV artifacts


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def replications_filename(dgp_id: int, estimator: str) -> str:
    return f"replications_{int(dgp_id)}_{estimator.replace('^', '_')}.csv"


def write_replications(path, records: Sequence[ReplicationRecord], true_late: float, seed: int) -> None:
    """Per-replication CSV with a ``# seed=...`` header line."""
    _, _, _, _, vp, vs, covered, _ = _flags(records, true_late)
    with open(path, "w", newline="") as fh:
        fh.write(f"# seed={int(seed)} true_late={float(true_late)!r}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPLICATION_COLUMNS)
        for k, r in enumerate(records):
            w.writerow([_fmt(r.rep), _fmt(r.theta), _fmt(r.se), _fmt(r.ci_lower), _fmt(r.ci_upper),
                        _fmt(r.first_stage), _fmt(r.n_trimmed), _fmt(r.bootstrap_failed), _fmt(vp[k]),
                        _fmt(vs[k]), _fmt(covered[k]), r.error])


def read_replications(path) -> tuple[list[ReplicationRecord], dict]:
    """Records and header fields of a per-replication CSV."""
    with open(path, newline="") as fh:
        header = fh.readline().lstrip("#").split()
        meta = dict(h.split("=", 1) for h in header)
        recs = [ReplicationRecord(int(r["rep"]), float(r["theta"]), float(r["se"]), float(r["ci_lower"]),
                                  float(r["ci_upper"]), float(r["first_stage"]), int(r["n_trimmed"]),
                                  int(r["bootstrap_failed"]), r["error"]) for r in csv.DictReader(fh)]
    return recs, meta


def write_metrics(path, rows: Sequence[MetricsRow], seed: int) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# seed={int(seed)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for r in rows:
            d = asdict(r)
            w.writerow([_fmt(d[c]) for c in METRICS_COLUMNS])


def read_metrics(path) -> list[MetricsRow]:
    types = {f.name: f.type for f in fields(MetricsRow)}
    rows = []
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    for rec in csv.DictReader(lines):
        kw = {}
        for k, v in rec.items():
            t = types[k]
            kw[k] = v if t == "str" else int(v) if t == "int" else float(v)
        rows.append(MetricsRow(**kw))
    return rows
