"""INI configuration for simulation runs and the driver that writes their artifacts."""

from __future__ import annotations

import configparser
import csv
import os
from dataclasses import dataclass, field

from ..errors import ConfigError
from ..estimators import ESTIMATORS
from ..forest import ForestParams
from .designs import dgp_spec
from .population import DesignConfig
from .simulation import (
    SimulationSettings,
    population_for,
    replications_filename,
    run_simulation,
    write_metrics,
    write_replications,
    _fmt,
)

__all__ = ["SimulationConfig", "REQUIRED_KEYS", "parse_config", "load_config", "run_config"]

REQUIRED_KEYS = ("dgp_ids", "n_reps", "estimators", "seed", "output_dir")


@dataclass(frozen=True)
class SimulationConfig:
    """Everything a ``simulate`` run needs.

    The ``[simulation]`` section holds ``dgp_ids`` (comma list of ids in
    1..32), ``n_reps``, ``estimators`` (comma list or ``all``), ``seed`` and
    ``output_dir``, plus optional ``bootstrap``, ``sample_size`` (overrides
    the grid size), ``base_size``, ``trim``, ``ci``, ``level``,
    ``radius_multiplier``, ``extra_covariate``, ``bandwidth_grid``,
    ``selection_amplifier``, ``weak_threshold``, ``m_random``,
    ``m_selective``, ``m_discard`` and ``dump_population``. An optional
    ``[forest]`` section sets ``n_trees``, ``subsample``, ``min_leaf`` and
    ``mtry``.
    """

    dgp_ids: tuple
    n_reps: int
    estimators: tuple
    seed: int
    output_dir: str
    bootstrap: int = 199
    sample_size: int | None = None
    dump_population: bool = False
    settings: SimulationSettings = field(default_factory=SimulationSettings)


def _get(section, key, conv, default=None):
    if key not in section:
        return default
    raw = section[key].strip()
    try:
        return conv(raw)
    except ValueError as exc:
        raise ConfigError(f"invalid value for {key!r}: {raw!r}") from exc


def _ints(raw):
    return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)


def _floats(raw):
    return tuple(float(v) for v in raw.replace(" ", "").split(",") if v)


def _bool(raw):
    low = raw.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(raw)


def parse_config(text: str, base_dir: str | None = None) -> SimulationConfig:
    """Parse INI text into a :class:`SimulationConfig`.

    Raises
    ------
    ConfigError
        Naming the first missing required key or the first invalid value.
    """
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from exc
    if "simulation" not in cp:
        raise ConfigError("missing section [simulation]")
    s = cp["simulation"]
    for key in REQUIRED_KEYS:
        if key not in s or not s[key].strip():
            raise ConfigError(f"missing required key {key!r} in [simulation]")
    dgp_ids = _get(s, "dgp_ids", _ints)
    if not dgp_ids or any(not 1 <= i <= 32 for i in dgp_ids):
        raise ConfigError("dgp_ids must list ids between 1 and 32")
    names = [n.strip() for n in s["estimators"].split(",") if n.strip()]
    if names == ["all"]:
        names = list(ESTIMATORS)
    bad = [n for n in names if n not in ESTIMATORS]
    if bad or not names:
        raise ConfigError(f"unknown estimator(s) {', '.join(bad)}; valid names: {', '.join(ESTIMATORS)}")
    n_reps = _get(s, "n_reps", int)
    if n_reps < 1:
        raise ConfigError("n_reps must be positive")
    out = s["output_dir"].strip()
    if base_dir and not os.path.isabs(out):
        out = os.path.join(base_dir, out)
    design = DesignConfig(
        m_random=_get(s, "m_random", int, 58),
        m_selective=_get(s, "m_selective", int, 22),
        m_discard=_get(s, "m_discard", int, 3),
        selection_amplifier=_get(s, "selection_amplifier", float, 1.5),
        weak_threshold=_get(s, "weak_threshold", float, 1.25),
    )
    forest = ForestParams()
    if "forest" in cp:
        f = cp["forest"]
        forest = ForestParams(
            n_trees=_get(f, "n_trees", int, forest.n_trees),
            subsample=_get(f, "subsample", float, forest.subsample),
            min_leaf=_get(f, "min_leaf", int, forest.min_leaf),
            mtry=_get(f, "mtry", int, None),
        )
    try:
        settings = SimulationSettings(
            trim_threshold=_get(s, "trim", float, 5.0),
            ci=_get(s, "ci", str, "normal"),
            level=_get(s, "level", float, 95.0),
            radius_multiplier=_get(s, "radius_multiplier", float, 3.0),
            extra_covariate=_get(s, "extra_covariate", str, "age_first_birth"),
            forest=forest,
            bandwidth_grid=_get(s, "bandwidth_grid", _floats, SimulationSettings().bandwidth_grid),
            base_size=_get(s, "base_size", int, 100_000),
            design=design,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if settings.base_size < 10_000:
        raise ConfigError("base_size must be at least 10000")
    bootstrap = _get(s, "bootstrap", int, 199)
    if bootstrap < 2:
        raise ConfigError("bootstrap must be at least 2")
    return SimulationConfig(dgp_ids, n_reps, tuple(names), _get(s, "seed", int), out, bootstrap,
                            _get(s, "sample_size", int, None), _get(s, "dump_population", _bool, False), settings)


def load_config(path) -> SimulationConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, os.path.dirname(os.path.abspath(path)))


def _dump_population(path, pop, seed):
    with open(path, "w", newline="") as fh:
        fh.write(f"# seed={int(seed)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(pop.column_names) + ["z", "d1", "d0", "y1", "y0"])
        for i in range(pop.n):
            w.writerow([_fmt(v) for v in pop.x[i]] + [_fmt(pop.z[i]), _fmt(pop.d1[i]), _fmt(pop.d0[i]),
                                                     _fmt(pop.y1[i]), _fmt(pop.y0[i])])


def run_config(cfg: SimulationConfig, workers: int | None = None, log=None) -> list:
    """Run every configured DGP and write the replication and metrics CSVs.

    Returns the metrics rows in (dgp, estimator) order.
    """
    os.makedirs(cfg.output_dir, exist_ok=True)
    rows = []
    for dgp_id in cfg.dgp_ids:
        spec = dgp_spec(dgp_id)
        if cfg.sample_size is not None:
            spec = spec.scaled(cfg.sample_size)
        if log:
            log(f"dgp {dgp_id}: {cfg.n_reps} replications at n={spec.sample_size}")
        pop = population_for(spec, cfg.seed, cfg.settings)
        if cfg.dump_population:
            _dump_population(os.path.join(cfg.output_dir, f"population_{dgp_id}.csv"), pop, cfg.seed)
        res = run_simulation(spec, cfg.estimators, cfg.n_reps, cfg.bootstrap, cfg.seed, settings=cfg.settings,
                             population=pop, workers=workers)
        for name, recs in res.replications.items():
            write_replications(os.path.join(cfg.output_dir, replications_filename(dgp_id, name)), recs,
                               res.true_late, cfg.seed)
        rows.extend(res.rows)
    write_metrics(os.path.join(cfg.output_dir, "metrics.csv"), rows, cfg.seed)
    return rows
