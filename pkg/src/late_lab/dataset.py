"""Observed-data model, CSV ingestion and descriptive diagnostics."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    DegenerateNull,
    EmptyInstrumentArm,
    MissingColumn,
    NonBinaryIndicator,
    NonFiniteValue,
    ZeroVariancePair,
)

__all__ = [
    "Dataset",
    "CsvSchema",
    "load_csv",
    "save_csv",
    "standardized_difference",
    "standardized_difference_from_moments",
    "nagelkerke_pseudo_r2",
    "instrument_pseudo_r2",
    "describe",
]


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


def _is_binary(v: np.ndarray) -> bool:
    return bool(np.all((v == 0.0) | (v == 1.0)))


@dataclass(frozen=True)
class Dataset:
    """An i.i.d. sample ``{y_i, d_i, z_i, x_i}``.

    ``x`` may have zero columns (no covariates). Arrays are copied on
    construction and made read-only.
    """

    y: np.ndarray
    d: np.ndarray
    z: np.ndarray
    x: np.ndarray
    column_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        y = _frozen(np.ravel(self.y))
        d = _frozen(np.ravel(self.d))
        z = _frozen(np.ravel(self.z))
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1) if x.size else x.reshape(len(y), 0)
        x = _frozen(x)
        n = len(y)
        if n < 2:
            raise EmptyInstrumentArm(f"need at least 2 observations, got {n}")
        if len(d) != n or len(z) != n or x.shape[0] != n:
            raise ValueError("y, d, z and x must share the same number of rows")
        for name, arr in (("y", y), ("d", d), ("z", z), ("x", x)):
            if not np.all(np.isfinite(arr)):
                raise NonFiniteValue(f"non-finite value in {name}")
        if not _is_binary(d):
            raise NonBinaryIndicator("treatment must take values in {0, 1}")
        if not _is_binary(z):
            raise NonBinaryIndicator("instrument must take values in {0, 1}")
        n1 = int(z.sum())
        if n1 == 0 or n1 == n:
            raise EmptyInstrumentArm("both instrument arms must be nonempty")
        names = tuple(self.column_names) or tuple(f"x{j + 1}" for j in range(x.shape[1]))
        if len(names) != x.shape[1]:
            raise ValueError("column_names must have one label per covariate column")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "column_names", names)

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def n1(self) -> int:
        return int(self.z.sum())

    @property
    def n0(self) -> int:
        return self.n - self.n1

    @property
    def k(self) -> int:
        return self.x.shape[1]

    def take(self, idx) -> "Dataset":
        """Rows ``idx`` (an index array or boolean mask) as a new Dataset."""
        idx = np.asarray(idx)
        return Dataset(self.y[idx], self.d[idx], self.z[idx], self.x[idx], self.column_names)

    def with_outcome(self, y) -> "Dataset":
        return Dataset(y, self.d, self.z, self.x, self.column_names)

    def select_columns(self, keep) -> "Dataset":
        keep = np.asarray(keep, dtype=int)
        names = tuple(self.column_names[j] for j in keep)
        return Dataset(self.y, self.d, self.z, self.x[:, keep], names)

    def column(self, name: str) -> np.ndarray:
        try:
            j = self.column_names.index(name)
        except ValueError:
            raise MissingColumn(f"no covariate named {name!r}") from None
        return self.x[:, j]


@dataclass(frozen=True)
class CsvSchema:
    """Binding of CSV columns to roles.

    Covariates default to every column not bound to a role and not listed in
    ``exclude``.
    """

    outcome: str = "y"
    treatment: str = "d"
    instrument: str = "z"
    covariates: tuple[str, ...] | None = None
    exclude: tuple[str, ...] = ()


def load_csv(path: str | os.PathLike, schema: CsvSchema | None = None) -> Dataset:
    """Read a comma-separated file with one header row into a Dataset.

    Lines starting with ``#`` are ignored. Row order is preserved.
    """
    schema = schema or CsvSchema()
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(line for line in fh if not line.startswith("#")) if r]
    if not rows:
        raise MissingColumn(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    body = rows[1:]
    roles = (schema.outcome, schema.treatment, schema.instrument)
    for col in roles:
        if col not in header:
            raise MissingColumn(f"{path}: missing column {col!r}")
    if schema.covariates is not None:
        covs = list(schema.covariates)
        for col in covs:
            if col not in header:
                raise MissingColumn(f"{path}: missing covariate column {col!r}")
    else:
        covs = [h for h in header if h not in roles and h not in schema.exclude]
    if not covs:
        raise MissingColumn(f"{path}: no covariate columns")

    pos = {h: i for i, h in enumerate(header)}
    try:
        values = np.array([[float(r[pos[h]]) for h in header] for r in body], dtype=float)
    except (ValueError, IndexError) as exc:
        raise NonFiniteValue(f"{path}: unparsable value ({exc})") from None
    if values.size == 0:
        raise EmptyInstrumentArm(f"{path}: no data rows")

    def col(name):
        return values[:, pos[name]]

    x = np.column_stack([col(c) for c in covs])
    return Dataset(col(schema.outcome), col(schema.treatment), col(schema.instrument), x, tuple(covs))


def save_csv(data: Dataset, path: str | os.PathLike, schema: CsvSchema | None = None,
             header_comment: str | None = None) -> None:
    """Write ``data`` so that :func:`load_csv` with the same schema restores it exactly."""
    schema = schema or CsvSchema()
    with open(path, "w", newline="") as fh:
        if header_comment:
            for line in header_comment.splitlines():
                fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([schema.outcome, schema.treatment, schema.instrument, *data.column_names])
        for i in range(data.n):
            w.writerow([repr(float(data.y[i])), repr(float(data.d[i])), repr(float(data.z[i])),
                        *(repr(float(v)) for v in data.x[i])])


def standardized_difference_from_moments(mean0: float, sd0: float, mean1: float, sd1: float) -> float:
    """Standardized difference in percent from group means and standard deviations."""
    denom = math.sqrt(sd0**2 + sd1**2)
    if denom == 0.0:
        if mean0 == mean1:
            return 0.0
        raise ZeroVariancePair("both groups have zero variance")
    return 100.0 * abs(mean1 - mean0) / denom


def standardized_difference(v0, v1) -> float:
    """Absolute mean difference normalized by ``sqrt(s1^2 + s0^2)``, in percent.

    Binary (0/1) variables use the population variance ``p(1-p)``; all other
    variables use the sample variance with ``n - 1`` in the denominator.

    Raises
    ------
    ZeroVariancePair
        If both groups are constant but at different values.
    """
    v0 = np.asarray(v0, dtype=float).ravel()
    v1 = np.asarray(v1, dtype=float).ravel()
    if v0.size == 0 or v1.size == 0:
        raise ValueError("both groups must be nonempty")
    m0, m1 = v0.mean(), v1.mean()
    if _is_binary(v0) and _is_binary(v1):
        s0 = math.sqrt(m0 * (1.0 - m0))
        s1 = math.sqrt(m1 * (1.0 - m1))
    else:
        s0 = float(v0.std(ddof=1)) if v0.size > 1 else 0.0
        s1 = float(v1.std(ddof=1)) if v1.size > 1 else 0.0
    return standardized_difference_from_moments(m0, s0, m1, s1)


def nagelkerke_pseudo_r2(loglik_null: float, loglik_full: float, n: int) -> float:
    """Nagelkerke's R^2 from null and full model log likelihoods."""
    if n < 1:
        raise ValueError("n must be positive")
    if loglik_null == 0.0:
        raise DegenerateNull("null log likelihood is zero")
    if loglik_full < loglik_null:
        raise ValueError("full model log likelihood below the null model's")
    num = 1.0 - math.exp(-(-2.0 * (loglik_null - loglik_full)) / n)
    den = 1.0 - math.exp(-(-2.0 * loglik_null) / n)
    return num / den


def instrument_pseudo_r2(data: Dataset) -> float:
    """Nagelkerke's R^2 of a probit regression of the instrument on the covariates."""
    from .numopt import add_intercept, fit_binary_glm

    full = fit_binary_glm(add_intercept(data.x), data.z, "probit")
    null = fit_binary_glm(np.ones((data.n, 1)), data.z, "probit")
    return nagelkerke_pseudo_r2(null.loglik, max(full.loglik, null.loglik), data.n)


def _group_summary(v: np.ndarray) -> tuple[float, float | None]:
    if _is_binary(v):
        return float(v.mean()), None
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def describe(data: Dataset) -> list[dict]:
    """Descriptive statistics by treatment and by instrument state.

    One record per variable with group means, standard deviations (``None``
    for binary variables) and standardized differences, in the layout of a
    balance table.
    """
    variables: list[tuple[str, np.ndarray, Sequence[str]]] = [
        ("outcome", data.y, ("treatment", "instrument")),
        ("treatment", data.d, ("instrument",)),
        ("instrument", data.z, ("treatment",)),
    ]
    variables += [(name, data.x[:, j], ("treatment", "instrument")) for j, name in enumerate(data.column_names)]
    splits = {"treatment": data.d, "instrument": data.z}
    out = []
    for name, v, by in variables:
        rec: dict = {"variable": name}
        for split in ("treatment", "instrument"):
            if split not in by:
                continue
            g = splits[split]
            m0, s0 = _group_summary(v[g == 0])
            m1, s1 = _group_summary(v[g == 1])
            rec[f"{split}_0_mean"], rec[f"{split}_0_sd"] = m0, s0
            rec[f"{split}_1_mean"], rec[f"{split}_1_sd"] = m1, s1
            try:
                rec[f"{split}_stdiff"] = standardized_difference(v[g == 0], v[g == 1])
            except ZeroVariancePair:
                rec[f"{split}_stdiff"] = float("nan")
        out.append(rec)
    return out
