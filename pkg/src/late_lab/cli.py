"""Command-line interface: ``late-lab {describe, estimate, simulate, report}``."""

from __future__ import annotations

import argparse
import csv
import io
import math
import os
import sys

from . import __version__
from .dataset import CsvSchema, describe, load_csv
from .errors import LateLabError
from .estimators import ESTIMATORS, EstimatorSpec, estimate_many
from .inference import bootstrap_many, confidence_interval, percentile_interval

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2

ESTIMATE_COLUMNS = ("estimator", "theta", "se", "ci_lower", "ci_upper", "first_stage", "n_trimmed", "n_used",
                    "bootstrap_failed", "error")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_data_args(p):
    p.add_argument("--data", required=True, help="CSV file with one header row")
    p.add_argument("--outcome-col", default="y")
    p.add_argument("--treatment-col", default="d")
    p.add_argument("--instrument-col", default="z")
    p.add_argument("--covariates", default=None, help="comma-separated covariate columns (default: all others)")
    p.add_argument("--exclude", default="", help="comma-separated columns to ignore")


def _threads_arg(p):
    p.add_argument("--threads", type=int, default=None,
                   help="worker processes (default: $LATE_LAB_THREADS or 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="late-lab", description="Covariate-adjusted LATE estimation and simulation.")
    parser.add_argument("--version", action="version", version=f"late-lab {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("describe", help="balance table by treatment and instrument")
    _add_data_args(p)
    p.add_argument("--format", choices=("text", "csv"), default="text")

    p = sub.add_parser("estimate", help="point estimates with bootstrap inference")
    _add_data_args(p)
    p.add_argument("--estimator", required=True, help="estimator name or 'all'")
    p.add_argument("--trim", type=float, default=5.0, help="trimming threshold t in percent")
    p.add_argument("--trim-all", action="store_true", help="also trim before 'means'")
    p.add_argument("--bootstrap", type=int, default=199, help="bootstrap draws (0 disables)")
    p.add_argument("--ci", choices=("normal", "percentile"), default="normal")
    p.add_argument("--level", type=float, default=95.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--radius-multiplier", type=float, default=3.0)
    p.add_argument("--extra-covariate", default=None)
    p.add_argument("--format", choices=("text", "csv"), default=None,
                   help="default: text for one estimator, csv for 'all'")
    p.add_argument("--output", default=None, help="write to this file instead of stdout")
    _threads_arg(p)

    p = sub.add_parser("simulate", help="run a simulation study from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir", default=None, help="override output_dir from the config")
    _threads_arg(p)

    p = sub.add_parser("report", help="render metrics.csv as a performance table")
    p.add_argument("--metrics", required=True)
    p.add_argument("--group", choices=("overall", "by-design-feature", "by-dgp"), default="overall")
    p.add_argument("--sort", choices=("coverage_gap", "rmse", "bias"), default="coverage_gap")
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.add_argument("--output", default=None)
    return parser


def _split(s):
    return tuple(c.strip() for c in s.split(",") if c.strip()) if s else ()


def _schema(args) -> CsvSchema:
    covs = _split(args.covariates) or None
    return CsvSchema(args.outcome_col, args.treatment_col, args.instrument_col, covs, _split(args.exclude))


def _emit(text: str, path: str | None):
    if path:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _cmd_describe(args) -> int:
    data = load_csv(args.data, _schema(args))
    recs = describe(data)
    cols = list(dict.fromkeys(k for r in recs for k in r))
    if args.format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in recs:
            w.writerow(["" if r.get(c) is None else _fmt(r.get(c)) for c in cols])
        _emit(buf.getvalue(), None)
        return EXIT_OK
    cells = [cols] + [["" if r.get(c) is None else (f"{r[c]:.6g}" if isinstance(r[c], float) else str(r[c]))
                       for c in cols] for r in recs]
    widths = [max(len(row[j]) for row in cells) for j in range(len(cols))]
    lines = ["  ".join(row[j].rjust(widths[j]) if j else row[j].ljust(widths[j]) for j in range(len(cols)))
             for row in cells]
    sys.stdout.write(f"n={data.n}  n1={data.n1}  n0={data.n0}\n" + "\n".join(lines) + "\n")
    return EXIT_OK


def _cmd_estimate(args) -> int:
    names = list(ESTIMATORS) if args.estimator == "all" else [args.estimator]
    if args.estimator != "all" and args.estimator not in ESTIMATORS:
        raise UsageError(f"unknown estimator {args.estimator!r}; valid names: {', '.join(ESTIMATORS)}")
    if args.bootstrap == 1 or args.bootstrap < 0:
        raise UsageError("--bootstrap must be 0 or at least 2")
    if not 0.0 < args.trim <= 100.0:
        raise UsageError("--trim must lie in (0, 100]")
    data = load_csv(args.data, _schema(args))
    specs = [EstimatorSpec(n, trim_threshold=args.trim, trim_all=args.trim_all,
                           radius_multiplier=args.radius_multiplier, extra_covariate=args.extra_covariate,
                           seed=args.seed) for n in names]
    points = estimate_many(specs, data)
    boots = bootstrap_many(specs, data, args.bootstrap, args.seed, args.threads) if args.bootstrap else {}
    rows = []
    for n in names:
        p = points[n]
        if isinstance(p, BaseException):
            rows.append(dict(estimator=n, theta=math.nan, se=math.nan, ci_lower=math.nan, ci_upper=math.nan,
                             first_stage=math.nan, n_trimmed=0, n_used=0, bootstrap_failed=0,
                             error=f"{type(p).__name__}: {p}"))
            continue
        row = dict(estimator=n, theta=p.theta, se=math.nan, ci_lower=math.nan, ci_upper=math.nan,
                   first_stage=p.first_stage, n_trimmed=p.n_trimmed, n_used=p.n_used, bootstrap_failed=0, error="")
        b = boots.get(n)
        if isinstance(b, BaseException):
            row["error"] = f"{type(b).__name__}: {b}"
            row["bootstrap_failed"] = args.bootstrap
        elif b is not None:
            row["se"] = b.se
            row["bootstrap_failed"] = b.n_failed
            if args.ci == "percentile":
                row["ci_lower"], row["ci_upper"] = percentile_interval(b.replicate_estimates, args.level)
            else:
                row["ci_lower"], row["ci_upper"] = confidence_interval(p.theta, b.se, args.level)
        rows.append(row)
    fmt = args.format or ("csv" if args.estimator == "all" else "text")
    header = (f"seed={args.seed} trim={args.trim!r} bootstrap={args.bootstrap} ci={args.ci} "
              f"level={args.level!r} n={data.n}")
    if fmt == "csv":
        buf = io.StringIO()
        buf.write(f"# {header}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(ESTIMATE_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in ESTIMATE_COLUMNS])
        _emit(buf.getvalue(), args.output)
    else:
        out = [f"# {header}"]
        for r in rows:
            out.append(f"{r['estimator']}: theta={r['theta']:.6g} se={r['se']:.6g} "
                       f"ci=[{r['ci_lower']:.6g}, {r['ci_upper']:.6g}] first_stage={r['first_stage']:.6g} "
                       f"trimmed={r['n_trimmed']} used={r['n_used']}"
                       + (f" error={r['error']}" if r["error"] else ""))
        _emit("\n".join(out) + "\n", args.output)
    failed = [r for r in rows if r["error"] and math.isnan(r["theta"])]
    if failed and len(names) == 1:
        sys.stderr.write(f"late-lab: {failed[0]['error']}\n")
        return EXIT_DATA
    return EXIT_OK


def _cmd_simulate(args) -> int:
    from dataclasses import replace

    from .emcs.config import load_config, run_config

    cfg = load_config(args.config)
    if args.output_dir:
        cfg = replace(cfg, output_dir=args.output_dir)
    rows = run_config(cfg, workers=args.threads, log=lambda m: sys.stderr.write(m + "\n"))
    sys.stderr.write(f"wrote {len(rows)} metrics rows to {os.path.join(cfg.output_dir, 'metrics.csv')}\n")
    return EXIT_OK


def _cmd_report(args) -> int:
    from .emcs.simulation import read_metrics
    from .report import TableSpec, render

    try:
        rows = read_metrics(args.metrics)
    except (KeyError, ValueError, TypeError) as exc:
        raise LateLabError(f"{args.metrics}: not a metrics file ({exc})") from exc
    if not rows:
        raise LateLabError(f"{args.metrics}: no metrics rows")
    table = render(rows, TableSpec(args.group, args.sort))
    _emit(table.csv if args.format == "csv" else table.text, args.output)
    return EXIT_OK


_COMMANDS = {"describe": _cmd_describe, "estimate": _cmd_estimate, "simulate": _cmd_simulate,
             "report": _cmd_report}


def main(argv=None) -> int:
    """Run the CLI; returns 0 on success, 1 on usage errors, 2 on data or configuration errors."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("late-lab: a subcommand is required (describe, estimate, simulate, report)")
        threads = getattr(args, "threads", None)
        if threads is not None and threads < 1:
            raise UsageError("--threads must be positive")
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (LateLabError, OSError) as exc:
        sys.stderr.write(f"late-lab: {exc}\n")
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
