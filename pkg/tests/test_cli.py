from __future__ import annotations

import csv
import os
import subprocess
import sys

import numpy as np
import pytest

from late_lab import __version__
from late_lab.cli import ESTIMATE_COLUMNS, main
from late_lab.emcs.simulation import METRICS_COLUMNS
from late_lab.estimators import ESTIMATORS

SIM_CONFIG = """\
[simulation]
dgp_ids = 1
n_reps = 3
estimators = means, reg
seed = 4
output_dir = {out}
bootstrap = 5
sample_size = 300
base_size = 10000

[forest]
n_trees = 20
"""


@pytest.fixture
def toy_csv(tmp_path):
    rng = np.random.default_rng(0)
    n = 200
    x1, x2 = rng.normal(size=n), rng.normal(size=n)
    z = (rng.uniform(size=n) < 0.5).astype(int)
    d = np.where(rng.uniform(size=n) < 0.7, z, 0)
    y = x1 + 2.0 * d + rng.normal(size=n)
    path = tmp_path / "toy.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["y", "d", "z", "x1", "x2"])
        w.writerows(zip(y, d, z, x1, x2))
    return str(path)


def test_estimate_means_text(toy_csv, capsys):
    assert main(["estimate", "--data", toy_csv, "--estimator", "means", "--bootstrap", "9"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("# seed=0") and "means: theta=" in out


def test_estimate_csv_file_repeatable(toy_csv, tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    args = ["estimate", "--data", toy_csv, "--estimator", "ipw^probit", "--bootstrap", "9", "--format", "csv",
            "--seed", "3"]
    assert main(args + ["--output", str(a)]) == 0
    assert main(args + ["--output", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    lines = a.read_text().splitlines()
    assert lines[0].startswith("# seed=3")
    assert tuple(lines[1].split(",")) == ESTIMATE_COLUMNS
    rec = next(csv.DictReader(lines[1:]))
    assert float(rec["ci_lower"]) < float(rec["theta"]) < float(rec["ci_upper"])


def test_estimate_all_defaults_to_csv(toy_csv, capsys):
    assert main(["estimate", "--data", toy_csv, "--estimator", "all", "--bootstrap", "0"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert tuple(lines[1].split(",")) == ESTIMATE_COLUMNS
    assert [ln.split(",")[0] for ln in lines[2:]] == list(ESTIMATORS)


def test_unknown_estimator_lists_valid_names(toy_csv, capsys):
    assert main(["estimate", "--data", toy_csv, "--estimator", "ols"]) == 1
    err = capsys.readouterr().err
    for name in ESTIMATORS:
        assert name in err


@pytest.mark.parametrize("extra", [["--bootstrap", "1"], ["--trim", "0"], ["--threads", "0"], ["--level"]])
def test_bad_arguments_are_usage_errors(toy_csv, extra):
    assert main(["estimate", "--data", toy_csv, "--estimator", "means"] + extra) == 1


def test_missing_subcommand_and_data_file(tmp_path, capsys):
    assert main([]) == 1
    assert main(["estimate", "--data", str(tmp_path / "nope.csv"), "--estimator", "means"]) == 2


def test_version(capsys):
    assert main(["--version"]) == 0
    assert capsys.readouterr().out.strip() == f"late-lab {__version__}"


def test_describe(toy_csv, capsys):
    assert main(["describe", "--data", toy_csv, "--format", "csv"]) == 0
    out = capsys.readouterr().out
    assert "x1" in out and "x2" in out


def test_simulate_missing_key_names_it(tmp_path, capsys):
    cfg = tmp_path / "sim.ini"
    cfg.write_text(SIM_CONFIG.format(out="out").replace("n_reps = 3\n", ""))
    assert main(["simulate", "--config", str(cfg)]) == 2
    assert "n_reps" in capsys.readouterr().err


def test_simulate_and_report_are_repeatable(tmp_path, capsys):
    cfg = tmp_path / "sim.ini"
    cfg.write_text(SIM_CONFIG.format(out="run"))
    assert main(["simulate", "--config", str(cfg), "--output-dir", str(tmp_path / "a")]) == 0
    assert main(["simulate", "--config", str(cfg), "--output-dir", str(tmp_path / "b"), "--threads", "2"]) == 0
    files = sorted(os.listdir(tmp_path / "a"))
    assert "metrics.csv" in files and files == sorted(os.listdir(tmp_path / "b"))
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
    lines = (tmp_path / "a" / "metrics.csv").read_text().splitlines()
    assert lines[0] == "# seed=4" and tuple(lines[1].split(",")) == METRICS_COLUMNS

    metrics = str(tmp_path / "a" / "metrics.csv")
    capsys.readouterr()
    assert main(["report", "--metrics", metrics, "--format", "csv"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("group,estimator,n_dgps,coverage,coverage_diff")
    assert {ln.split(",")[1] for ln in out[1:]} == {"means", "reg"}
    assert main(["report", "--metrics", metrics, "--group", "by-dgp", "--sort", "rmse"]) == 0


def test_report_rejects_non_metrics_file(toy_csv):
    assert main(["report", "--metrics", toy_csv]) == 2


def test_console_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "late_lab.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip() == f"late-lab {__version__}"
