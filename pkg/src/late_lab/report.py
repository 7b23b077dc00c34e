"""Performance tables from simulation metrics: grouping, sorting, best-performer gaps and average ranks."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .emcs.designs import dgp_spec
from .emcs.simulation import MetricsRow

__all__ = [
    "GROUPINGS",
    "SORT_KEYS",
    "METRICS",
    "TableSpec",
    "RenderedTable",
    "render",
    "parse",
    "table_columns",
    "design_groups",
]

GROUPINGS = ("overall", "by-design-feature", "by-dgp")
SORT_KEYS = ("coverage_gap", "rmse", "bias")
METRICS = ("coverage", "interval_length", "abs_bias", "sd", "rmse", "se_bias")
NOMINAL = 95.0

_RANK_FIELD = {
    "coverage": "rank_coverage",
    "interval_length": "rank_interval_length",
    "abs_bias": "rank_abs_bias",
    "sd": "rank_sd",
    "rmse": "rank_rmse",
    "se_bias": "rank_se_bias",
}
_FEATURES = (
    ("heterogeneity", lambda s: int(s.heterogeneity)),
    ("strong_selection", lambda s: int(s.strong_selection)),
    ("observed_strength", lambda s: int(s.observed_strength)),
    ("binary_outcome", lambda s: int(s.binary_outcome)),
    ("sample_size", lambda s: s.sample_size),
)


@dataclass(frozen=True)
class TableSpec:
    """Layout of a performance table.

    Parameters
    ----------
    grouping : {"overall", "by-design-feature", "by-dgp"}
    sort_key : {"coverage_gap", "rmse", "bias"}
        ``coverage_gap`` sorts by ``|coverage - 95|`` with ties broken by the
        shorter interval; the sort is stable.
    columns : tuple of str
        Metrics to show, each followed by its ``_diff`` column.
    """

    grouping: str = "overall"
    sort_key: str = "coverage_gap"
    columns: tuple = METRICS

    def __post_init__(self):
        if self.grouping not in GROUPINGS:
            raise ValueError(f"grouping must be one of {GROUPINGS}")
        if self.sort_key not in SORT_KEYS:
            raise ValueError(f"sort_key must be one of {SORT_KEYS}")
        bad = [c for c in self.columns if c not in METRICS]
        if bad or not self.columns:
            raise ValueError(f"unknown metric column(s) {bad}; choose from {METRICS}")


@dataclass(frozen=True)
class RenderedTable:
    columns: tuple
    records: list
    csv: str
    text: str


def table_columns(spec: TableSpec) -> tuple:
    """Column order of a rendered table."""
    cols = ["group", "estimator", "n_dgps"]
    for m in spec.columns:
        cols += [m, f"{m}_diff"]
    return tuple(cols + ["rank"])


def design_groups(rows: Sequence[MetricsRow], grouping: str) -> list[tuple[str, list[MetricsRow]]]:
    """Split rows into the groups of a table, in a fixed order."""
    if grouping == "overall":
        return [("all", list(rows))]
    if grouping == "by-dgp":
        ids = sorted({r.dgp_id for r in rows})
        return [(f"dgp={i}", [r for r in rows if r.dgp_id == i]) for i in ids]
    out = []
    for name, get in _FEATURES:
        values: dict = {}
        for r in rows:
            values.setdefault(get(dgp_spec(r.dgp_id)), []).append(r)
        for v in sorted(values):
            out.append((f"{name}={v}", values[v]))
    return out


def _nanmean(vals) -> float:
    v = np.asarray(vals, dtype=float)
    v = v[np.isfinite(v)]
    return float(v.mean()) if v.size else math.nan


def _diffs(values: np.ndarray, metric: str) -> np.ndarray:
    """Gap to the best entry: percentage points for coverage, percent of the best value otherwise."""
    if metric == "coverage":
        gap = np.abs(values - NOMINAL)
        best = np.nanmin(gap) if np.isfinite(gap).any() else math.nan
        return gap - best
    v = np.abs(values) if metric == "se_bias" else values
    if not np.isfinite(v).any():
        return np.full(v.shape, math.nan)
    best = np.nanmin(v)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        if best == 0.0:
            return np.where(v == 0.0, 0.0, math.inf)
        return 100.0 * (v - best) / best


def _sort_key(spec: TableSpec, rec: dict):
    def finite(v):
        return v if np.isfinite(v) else math.inf

    if spec.sort_key == "coverage_gap":
        return (finite(abs(rec["coverage"] - NOMINAL)), finite(rec["interval_length"]))
    if spec.sort_key == "rmse":
        return (finite(rec["rmse"]),)
    return (finite(rec["abs_bias"]),)


def _group_records(label: str, rows: Sequence[MetricsRow], spec: TableSpec) -> list[dict]:
    names = list(dict.fromkeys(r.estimator for r in rows))
    recs = []
    for name in names:
        mine = [r for r in rows if r.estimator == name]
        rec = {"group": label, "estimator": name, "n_dgps": len({r.dgp_id for r in mine})}
        for m in METRICS:
            rec[m] = _nanmean([getattr(r, m) for r in mine])
        ranks = [getattr(r, _RANK_FIELD[m]) for r in mine for m in spec.columns]
        rec["rank"] = _nanmean(ranks)
        recs.append(rec)
    for m in spec.columns:
        d = _diffs(np.array([r[m] for r in recs], dtype=float), m)
        for r, v in zip(recs, d):
            r[f"{m}_diff"] = float(v)
    recs.sort(key=lambda r: _sort_key(spec, r))
    cols = table_columns(spec)
    return [{c: r[c] for c in cols} for r in recs]


def _fmt_csv(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _fmt_text(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def render(rows: Sequence[MetricsRow], spec: TableSpec | None = None) -> RenderedTable:
    """Render metrics rows as a table (records, CSV text and aligned plain text).

    Metrics are averaged over the DGPs of each group; ``<metric>_diff`` is
    the gap to the best estimator of the group (in percentage points of
    ``|coverage - 95|`` for coverage, in percent of the best value for the
    others, using ``|se_bias|``); ``rank`` averages the per-DGP ranks of the
    shown metrics.
    """
    spec = spec or TableSpec()
    rows = list(rows)
    if not rows:
        raise ValueError("no metrics rows to render")
    records = []
    for label, group in design_groups(rows, spec.grouping):
        records.extend(_group_records(label, group, spec))
    cols = table_columns(spec)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in records:
        w.writerow([_fmt_csv(r[c]) for c in cols])
    cells = [list(cols)] + [[_fmt_text(r[c]) for c in cols] for r in records]
    widths = [max(len(row[j]) for row in cells) for j in range(len(cols))]
    lines = []
    for i, row in enumerate(cells):
        parts = [row[j].ljust(widths[j]) if j < 2 else row[j].rjust(widths[j]) for j in range(len(cols))]
        lines.append("  ".join(parts).rstrip())
        if i == 0:
            lines.append("  ".join("-" * wd for wd in widths))
    return RenderedTable(cols, records, buf.getvalue(), "\n".join(lines) + "\n")


def parse(text: str) -> list[dict]:
    """Read the CSV form of a rendered table back into records."""
    reader = csv.DictReader(io.StringIO(text))
    out = []
    for rec in reader:
        row = {}
        for k, v in rec.items():
            if k in ("group", "estimator"):
                row[k] = v
            elif k == "n_dgps":
                row[k] = int(v)
            else:
                row[k] = float(v)
        out.append(row)
    return out
