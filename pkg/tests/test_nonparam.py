from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from late_lab.errors import AllCandidatesDegenerate, EmptyNeighborhood
from late_lab.nonparam import (
    LOCAL_CONSTANT,
    LOCAL_LINEAR,
    KernelRegression,
    epanechnikov,
    fit_in_sample,
    fit_kernel_regression,
    lscv_bandwidth,
    lscv_score,
    predict,
    predict_many,
    silverman_bandwidth,
)
from oracles import brute
from oracles.golden import nw_points


def test_epanechnikov_values():
    assert epanechnikov(0.0) == 0.75
    assert epanechnikov(1.0) == 0.0 and epanechnikov(-1.0) == 0.0
    assert epanechnikov(0.5) == pytest.approx(0.5625, abs=1e-15)
    assert epanechnikov(3.0) == 0.0


def test_epanechnikov_integrates_to_one():
    u = np.linspace(-1.0, 1.0, 10_001)
    assert integrate.simpson(epanechnikov(u), x=u) == pytest.approx(1.0, abs=1e-8)


@pytest.mark.parametrize("mode", [LOCAL_CONSTANT, LOCAL_LINEAR])
def test_constant_response_reproduced(mode):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(40, 2))
    model = KernelRegression(x, np.full(40, 3.25), [0.8, 0.8], mode)
    for x0 in rng.normal(size=(5, 2)) * 0.5:
        assert predict(model, x0) == pytest.approx(3.25, abs=1e-12)


def test_local_linear_exact_on_lines():
    rng = np.random.default_rng(1)
    x = rng.uniform(-2, 2, size=60)
    y = 1.5 - 0.7 * x
    for h in (0.3, 1.0, 5.0):
        model = KernelRegression(x, y, h, LOCAL_LINEAR)
        for x0 in (-1.0, 0.2, 1.7):
            assert predict(model, [x0]) == pytest.approx(1.5 - 0.7 * x0, abs=1e-10)


def test_local_constant_hand_computed():
    # oracle: tests/oracles/freeze.py computes 331/260 with exact fractions
    xs, ys = nw_points()
    model = KernelRegression(np.array(xs, dtype=float), np.array(ys, dtype=float), 1.0, LOCAL_CONSTANT)
    assert predict(model, [0.0]) == pytest.approx(331 / 260, rel=1e-14)


def test_empty_neighborhood():
    model = KernelRegression([0.0, 1.0, 2.0], [1.0, 2.0, 3.0], 0.1)
    with pytest.raises(EmptyNeighborhood):
        predict(model, [10.0])
    pred, fallbacks = predict_many(model, np.array([[10.0], [1.0]]))
    assert fallbacks == 1
    assert pred[1] == 2.0


def test_local_constant_within_range_of_weighted_points():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(80, 2))
    y = rng.normal(size=80)
    model = KernelRegression(x, y, [0.7, 0.7])
    pred, _ = predict_many(model, rng.normal(size=(30, 2)) * 0.5)
    assert np.all(pred >= y.min() - 1e-12) and np.all(pred <= y.max() + 1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_local_constant_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(50, 2))
    y = rng.normal(size=50)
    q = rng.normal(size=(10, 2))
    perm = rng.permutation(50)
    a, _ = predict_many(KernelRegression(x, y, [0.6, 0.9]), q)
    b, _ = predict_many(KernelRegression(x[perm], y[perm], [0.6, 0.9]), q)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_huge_bandwidth_gives_global_mean():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(100, 3))
    y = rng.normal(size=100) + 4
    model = KernelRegression(x, y, 1e9)
    pred, _ = predict_many(model, rng.normal(size=(7, 3)))
    np.testing.assert_allclose(pred, y.mean(), rtol=1e-9)


@pytest.mark.parametrize("mode", [LOCAL_CONSTANT, LOCAL_LINEAR])
@pytest.mark.parametrize("seed,n,k", [(0, 30, 1), (1, 80, 2), (2, 150, 3), (3, 200, 1)])
def test_lscv_score_matches_quadratic_oracle(mode, seed, n, k):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, k))
    y = np.sin(x[:, 0]) + rng.normal(size=n) * 0.3
    h = silverman_bandwidth(x) * rng.choice([0.25, 1.0, 2.0])
    expected = brute.lscv_objective(x, y, h, linear=(mode == LOCAL_LINEAR))
    assert lscv_score(x, y, h, mode) == pytest.approx(expected, rel=1e-10)


def test_lscv_score_with_fallbacks_matches_oracle():
    x = np.array([0.0, 0.1, 0.2, 5.0, 9.0, 9.05])
    y = np.array([1.0, 2.0, 0.5, 7.0, 3.0, 4.0])
    h = np.array([0.15])
    assert lscv_score(x, y, h) == pytest.approx(brute.lscv_objective(x, y, h), rel=1e-12)


def test_lscv_singleton_grid():
    rng = np.random.default_rng(4)
    x = rng.normal(size=50)
    h = lscv_bandwidth(x, rng.normal(size=50), grid=(2.0,))
    np.testing.assert_allclose(h, 2.0 * silverman_bandwidth(x))


def test_lscv_prefers_oversmoothing_for_noise():
    rng = np.random.default_rng(5)
    x = rng.normal(size=300)
    y = rng.normal(size=300)
    sd = x.std(ddof=1)
    base = silverman_bandwidth(x)[0]
    grid = (0.1 * sd / base, 10 * sd / base)
    h = lscv_bandwidth(x, y, grid=grid)
    assert h[0] == pytest.approx(10 * sd)
    assert brute.lscv_objective(x, y, [10 * sd]) < brute.lscv_objective(x, y, [0.1 * sd])


def test_lscv_picks_exhaustive_argmin():
    rng = np.random.default_rng(6)
    x = rng.uniform(-3, 3, size=120)
    y = np.sin(2 * x) + 0.1 * rng.normal(size=120)
    base = silverman_bandwidth(x)
    scores = {f: brute.lscv_objective(x, y, f * base) for f in (1.0, 2.0)}
    best = min(scores, key=scores.get)
    np.testing.assert_allclose(lscv_bandwidth(x, y, grid=(1.0, 2.0)), best * base)


def test_lscv_ties_go_to_smallest():
    x = np.linspace(0, 1, 20)
    y = np.full(20, 2.0)
    np.testing.assert_allclose(lscv_bandwidth(x, y, grid=(4.0, 1.0, 2.0)), 1.0 * silverman_bandwidth(x))


def test_all_candidates_degenerate():
    x = np.array([0.0, 100.0, 200.0, 300.0])
    y = np.array([1.0, 2.0, 3.0, 4.0])
    with pytest.raises(AllCandidatesDegenerate):
        lscv_bandwidth(x, y, grid=(1e-6, 2e-6), baseline=[1e-6])


def test_fit_in_sample_matches_predict():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(60, 2))
    z = (rng.uniform(size=60) < 0.4).astype(float)
    model, fitted = fit_in_sample(x, z)
    assert model.mode == LOCAL_CONSTANT
    np.testing.assert_allclose(fitted, predict_many(model, x)[0], rtol=1e-12, atol=1e-14)
    assert fit_kernel_regression(x, rng.normal(size=60)).mode == LOCAL_LINEAR
