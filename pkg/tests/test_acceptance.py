"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line."""

from __future__ import annotations

import csv
import os

import numpy as np
import pytest
from scipy import integrate, special

from late_lab.cli import main
from late_lab.dataset import Dataset, standardized_difference_from_moments
from late_lab.emcs.designs import dgp_spec
from late_lab.emcs.population import Population, true_late
from late_lab.emcs.simulation import SimulationSettings, read_metrics, read_replications, run_simulation
from late_lab.estimators import compute_trim_mask, estimate, trim_mask_from_scores, weight_shares
from late_lab.forest import ForestParams, fit_forest, honest_leaf_values, predict_forest
from late_lab.inference import bootstrap_se
from late_lab.matching import NORMALIZED_EUCLIDEAN, PROPENSITY_GAP, pair_match, radius_match
from late_lab.nonparam import (
    LOCAL_CONSTANT,
    LOCAL_LINEAR,
    KernelRegression,
    epanechnikov,
    lscv_score,
    predict_many,
    silverman_bandwidth,
)
from late_lab.numopt import add_intercept, fit_binary_glm, minimize_cue_gmm
from late_lab.propensity import fit_cbps_ps, fit_kernel_ps
from oracles import brute
from oracles.golden import cue_problem


# ------------------------------------------------------------------ 1


def test_c01_intercept_only_collapse(verdict):
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        n = 200
        z = (rng.uniform(size=n) < 0.5).astype(float)
        d = np.where(rng.uniform(size=n) < 0.75, z, (rng.uniform(size=n) < 0.2).astype(float))
        data = Dataset(rng.normal(size=n) + 2 * d, d, z, np.zeros((n, 0)))
        ref = estimate("means", data).theta
        for name in ("ipw^probit", "dr^probit", "reg", "tsls"):
            worst = max(worst, abs(estimate(name, data).theta - ref) / abs(ref))
    ok = worst <= 1e-8
    verdict(1, ok, f"max relative gap to means {worst:.2e} (tol 1e-8, 20 datasets)")
    assert ok


# ------------------------------------------------------------------ 2


def _plans_agree(plan, expected, weights=True):
    worst = 0.0
    for i in range(plan.n):
        idx, w = plan.matches(i)
        if list(idx) != expected[i][0]:
            return False, np.inf
        if weights:
            worst = max(worst, float(np.max(np.abs(w - np.asarray(expected[i][1])))))
    return True, worst


def test_c02_matching_oracle(verdict):
    index_ok, worst = True, 0.0
    for inst in range(50):
        rng = np.random.default_rng(1000 + inst)
        n = int(rng.integers(2, 51))
        z = rng.permutation(np.r_[1.0, 0.0, (rng.uniform(size=n - 2) < 0.5).astype(float)])
        p = np.round(rng.uniform(0.02, 0.98, size=n), 2)
        x = np.round(rng.normal(size=(n, 2)), 1)
        x[:2] = [[0.0, 0.0], [1.0, 1.0]]  # no constant column
        data = Dataset(rng.normal(size=n), z, z, x)
        mult = float(rng.uniform(0.0, 4.0))
        pair_exp, _ = brute.nearest_plan(p.reshape(-1, 1).tolist(), z)
        ok1, _ = _plans_agree(pair_match(data, PROPENSITY_GAP, p), pair_exp, weights=False)
        cov_exp, _ = brute.nearest_plan((x / x.std(axis=0, ddof=1)).tolist(), z)
        ok2, _ = _plans_agree(pair_match(data, NORMALIZED_EUCLIDEAN), cov_exp, weights=False)
        rad_exp, _, _ = brute.radius_plan(p.reshape(-1, 1).tolist(), z, mult)
        ok3, w = _plans_agree(radius_match(data, p, mult), rad_exp)
        index_ok &= ok1 and ok2 and ok3
        worst = max(worst, w)
    ok = index_ok and worst <= 1e-12
    verdict(2, ok, f"indices identical={index_ok}, max weight gap {worst:.1e} (50 instances)")
    assert ok


# ------------------------------------------------------------------ 3


def test_c03_optimizer_oracles(verdict):
    worst = 0.0
    for seed in range(3):
        rng = np.random.default_rng(seed)
        n = 80
        x = rng.normal(size=n)
        for link in ("probit", "logit"):
            for dim in (1, 2):
                X = np.ones((n, 1)) if dim == 1 else add_intercept(x)
                eta = 0.3 - 0.2 * seed + (0.7 * x if dim == 2 else 0.0)
                z = (rng.uniform(size=n) < special.expit(1.6 * eta)).astype(float)
                fit = fit_binary_glm(X, z, link)
                ref = brute.zoom_maximize(lambda b: brute.binary_loglik(b, X, z, link), np.zeros(dim),
                                          np.full(dim, 2.0))
                worst = max(worst, float(np.max(np.abs(fit.coefficients - ref))))
    moments, _ = cue_problem()
    grid = brute.zoom_maximize(lambda b: -brute.cue_value(moments(b)), [0.0, 0.0], [3.0, 3.0])
    cue_gap = float(np.max(np.abs(minimize_cue_gmm(moments, np.zeros(2)).coefficients - grid)))
    ok = worst <= 1e-4 and cue_gap <= 1e-3
    verdict(3, ok, f"GLM max coefficient gap {worst:.1e} (tol 1e-4), CUE gap {cue_gap:.1e} (tol 1e-3)")
    assert ok


# ------------------------------------------------------------------ 4


def _max_weighted_stdiff(data, p):
    w1 = data.z / p
    w0 = (1 - data.z) / (1 - p)
    out = []
    for j in range(data.k):
        c = data.x[:, j]
        out.append(standardized_difference_from_moments(w0 @ c / w0.sum(), c[data.z == 0].std(ddof=1),
                                                        w1 @ c / w1.sum(), c[data.z == 1].std(ddof=1)))
    return max(out)


def test_c04_cbps_balance(verdict):
    wins = 0
    for seed in range(20):
        rng = np.random.default_rng(500 + seed)
        n = 500
        x = rng.normal(size=(n, 3))
        eta = -0.2 + x @ [0.6, -0.4, 0.3] + 0.25 * x[:, 0] ** 2
        z = (rng.uniform(size=n) < special.expit(eta)).astype(float)
        data = Dataset(x.sum(axis=1) + rng.normal(size=n), z, z, x)
        X = add_intercept(x)
        p_logit = special.expit(X @ fit_binary_glm(X, z, "logit").coefficients)
        p_cbps = fit_cbps_ps(data).scores
        wins += _max_weighted_stdiff(data, p_cbps) <= _max_weighted_stdiff(data, p_logit)
    ok = wins >= 18
    verdict(4, ok, f"CBPS at least as balanced as logit in {wins}/20 datasets (need 18)")
    assert ok


# ------------------------------------------------------------------ 5


def test_c05_trimming_contract(verdict):
    worst, trimmed_at_100 = 0.0, 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(60, 300))
        x = rng.normal(size=(n, 2))
        z = (rng.uniform(size=n) < special.expit(1.5 * x[:, 0])).astype(float)
        z[:2] = [1.0, 0.0]
        data = Dataset(rng.normal(size=n), z, z, x)
        kernel = fit_kernel_ps(data)
        raw = np.clip(special.expit(2.5 * x[:, 0] + rng.normal(size=n)), 1e-4, 1 - 1e-4)
        for scores in (kernel.scores, raw):
            shares = weight_shares(z, scores)
            keep = ~trim_mask_from_scores(z, scores, 5.0)
            worst = max(worst, float(shares[keep].max()))
            trimmed_at_100 += int(trim_mask_from_scores(z, scores, 100.0).sum())
        assert np.array_equal(compute_trim_mask(data, 5.0, scores=kernel),
                              trim_mask_from_scores(z, kernel.scores, 5.0))
        trimmed_at_100 += int(compute_trim_mask(data, 100.0, scores=kernel).sum())
    ok = worst <= 0.05 + 1e-12 and trimmed_at_100 == 0
    verdict(5, ok, f"max retained share {worst:.4f} (limit 0.05), trimmed at t=100: {trimmed_at_100}")
    assert ok


# ------------------------------------------------------------------ 6


def test_c06_bootstrap_sanity(verdict):
    hits = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n = 400
        z = (rng.uniform(size=n) < 0.5).astype(float)
        z[:2] = [1.0, 0.0]
        data = Dataset(rng.normal(size=n), z, z, np.zeros((n, 0)))
        se = bootstrap_se("means", data, B=199, seed=seed).se
        analytic = np.sqrt(data.y[z == 1].var(ddof=1) / data.n1 + data.y[z == 0].var(ddof=1) / data.n0)
        hits += abs(se / analytic - 1.0) <= 0.25
    ok = hits >= 90
    verdict(6, ok, f"bootstrap SE within 25% of analytic in {hits}/100 seeds (need 90)")
    assert ok


# ------------------------------------------------------------------ 7


def _wrong_propensity_population(rng, n):
    """Linear outcome model, probit instrument with an omitted quadratic term."""
    x = rng.normal(size=(n, 2))
    index = -0.2 + 0.5 * x[:, 0] - 0.3 * x[:, 1] + 0.4 * (x[:, 0] ** 2 - 1)
    z = (rng.uniform(size=n) < special.ndtr(index)).astype(float)
    u = rng.uniform(size=n)
    d1 = (u < 0.75).astype(float)
    d0 = (u < 0.15).astype(float)
    y0 = 1.0 + x[:, 0] - 0.5 * x[:, 1] + rng.normal(size=n)
    y1 = y0 + 1.5
    return Population(x, z, d1, d0, y1, y0, ("x1", "x2"))


@pytest.mark.slow
def test_c07_doubly_robust(verdict):
    rng = np.random.default_rng(7)
    err = []
    for _ in range(500):
        pop = _wrong_propensity_population(rng, 500)
        err.append(estimate("dr^probit", pop.as_dataset()).theta - true_late(pop))
    err = np.asarray(err)
    mc_se = err.std(ddof=1) / np.sqrt(err.size)
    ok = abs(err.mean()) <= 3 * mc_se
    verdict(7, ok, f"dr^probit mean bias {err.mean():+.4f}, 3 MC SE = {3 * mc_se:.4f} (500 reps)")
    assert ok


# ------------------------------------------------------------------ 8


@pytest.mark.slow
def test_c08_desk_coverage(verdict):
    names = ["tsls", "reg", "ipw^cbps", "randforest"]
    spec = dgp_spec(1).scaled(1000)
    res = run_simulation(spec, names, 200, 199, seed=0, settings=SimulationSettings())
    cov = {r.estimator: r.coverage for r in res.rows}
    ok = res.true_late == 0.0 and all(90.0 <= cov[n] <= 99.0 for n in names)
    detail = ", ".join(f"{n} {cov[n]:.1f}" for n in names)
    verdict(8, ok, f"coverage {detail} (band [90, 99], true LATE {res.true_late})")
    assert ok


# ------------------------------------------------------------------ 9, 10

SIM_CONFIG = """\
[simulation]
dgp_ids = 1, 6
n_reps = 8
estimators = means, tsls, reg, ipw^cbps, radmatch^probit, randforest
seed = 11
output_dir = out
bootstrap = 9
sample_size = 300
base_size = 10000

[forest]
n_trees = 20
"""


@pytest.fixture(scope="module")
def sim_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("simulate")
    cfg = root / "sim.ini"
    cfg.write_text(SIM_CONFIG)
    runs = {}
    for label, threads in (("t1a", 1), ("t1b", 1), ("t8a", 8), ("t8b", 8)):
        out = root / label
        code = main(["simulate", "--config", str(cfg), "--output-dir", str(out), "--threads", str(threads)])
        assert code == 0
        runs[label] = out
    return runs


def test_c09_metrics_algebra(verdict, sim_runs):
    out = sim_runs["t1a"]
    rows = read_metrics(out / "metrics.csv")
    identity = max(abs(r.rmse**2 - (r.abs_bias**2 + r.sd**2)) for r in rows)
    worst = 0.0
    for r in rows:
        path = out / f"replications_{r.dgp_id}_{r.estimator.replace('^', '_')}.csv"
        recs, meta = read_replications(path)
        with open(path, newline="") as fh:
            fh.readline()
            raw = [{k: float(rec[k]) for k in ("theta", "se", "ci_lower", "ci_upper")} for rec in csv.DictReader(fh)]
        assert len(raw) == len(recs)
        ref = brute.aggregate_rows(raw, float(meta["true_late"]))
        for key, val in ref.items():
            got = getattr(r, key)
            if np.isnan(val) and np.isnan(got):
                continue
            worst = max(worst, abs(got - val) / max(1.0, abs(val)))
    ok = identity <= 1e-9 and worst <= 1e-12
    verdict(9, ok, f"max |rmse^2 - bias^2 - sd^2| {identity:.1e}, re-aggregation gap {worst:.1e} ({len(rows)} rows)")
    assert ok


def test_c10_determinism(verdict, sim_runs):
    names = sorted(os.listdir(sim_runs["t1a"]))
    same = all(sorted(os.listdir(p)) == names for p in sim_runs.values())
    for f in names:
        ref = (sim_runs["t1a"] / f).read_bytes()
        same &= all((p / f).read_bytes() == ref for p in sim_runs.values())
    ok = same and "metrics.csv" in names
    verdict(10, ok, f"{len(names)} files byte-identical across two runs each at threads 1 and 8: {same}")
    assert ok


# ------------------------------------------------------------------ 11


def test_c11_forest_honesty_and_accuracy(verdict):
    rng = np.random.default_rng(11)
    x = rng.normal(size=(400, 2))
    y = x[:, 0] + rng.normal(size=400)
    model = fit_forest(x, y, ForestParams(n_trees=25), seed=3)
    honest = np.array_equal(honest_leaf_values(model, x, y), model.value)
    for t in range(model.n_trees):
        lo, hi = model.tree_start[t], model.tree_start[t + 1]
        y_bad = y.copy()
        y_bad[model.structure[t]] += 1e6
        honest &= np.array_equal(honest_leaf_values(model, x, y_bad)[lo:hi], model.value[lo:hi])
    errs = []
    for seed in range(5):
        r = np.random.default_rng(100 + seed)
        xs = r.uniform(-1, 1, size=2000)
        pred = predict_forest(fit_forest(xs, (xs > 0).astype(float), seed=seed), np.array([[-0.5], [0.5]]))
        errs.extend(pred - [0.0, 1.0])
    mse = float(np.mean(np.square(errs)))
    ok = honest and mse <= 0.01
    verdict(11, ok, f"structure-half perturbation leaves leaves unchanged: {honest}; step MSE {mse:.2e} (tol 0.01)")
    assert ok


# ------------------------------------------------------------------ 12


def test_c12_kernel_layer(verdict):
    mass, _ = integrate.quad(lambda u: float(epanechnikov(u)), -1.0, 1.0, epsabs=1e-13)
    norm_gap = abs(mass - 1.0)
    lscv_gap = 0.0
    for seed, n, k in ((0, 40, 1), (1, 120, 2), (2, 200, 1), (3, 200, 3)):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(n, k))
        y = np.sin(x[:, 0]) + rng.normal(size=n) * 0.3
        h = silverman_bandwidth(x) * (0.8 + 0.4 * seed)
        for mode in (LOCAL_CONSTANT, LOCAL_LINEAR):
            ref = brute.lscv_objective(x, y, h, linear=(mode == LOCAL_LINEAR))
            lscv_gap = max(lscv_gap, abs(lscv_score(x, y, h, mode) - ref) / abs(ref))
    rng = np.random.default_rng(9)
    x = rng.normal(size=(150, 2))
    y = rng.normal(size=150) + 3.0
    pred, _ = predict_many(KernelRegression(x, y, 1e9), rng.normal(size=(10, 2)))
    mean_gap = float(np.max(np.abs(pred - y.mean())))
    ok = norm_gap <= 1e-8 and lscv_gap <= 1e-10 and mean_gap <= 1e-9
    verdict(12, ok, f"kernel mass gap {norm_gap:.1e}, LSCV oracle gap {lscv_gap:.1e}, h->inf gap {mean_gap:.1e}")
    assert ok
