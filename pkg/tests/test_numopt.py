from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from late_lab.errors import NonFiniteObjective, RankDeficientDesign, SeparationWarning, SingularWeighting
from late_lab.numopt import (
    GmmOptions,
    add_intercept,
    cue_objective,
    fit_binary_glm,
    glm_loglik,
    glm_score,
    minimize_cue_gmm,
    nelder_mead,
)
from oracles import brute
from oracles.golden import cue_problem, golden_glm_rows


def test_probit_intercept_only_symmetric():
    z = np.array([0.0, 1.0] * 25)
    fit = fit_binary_glm(np.ones((50, 1)), z, "probit")
    assert fit.converged
    assert abs(fit.coefficients[0]) < 1e-10


def test_logit_intercept_only_closed_form():
    z = np.array([1.0] * 30 + [0.0] * 70)
    fit = fit_binary_glm(np.ones((100, 1)), z, "logit")
    assert fit.coefficients[0] == pytest.approx(math.log(0.3 / 0.7), abs=1e-10)


@pytest.mark.parametrize("link,expected", [
    # oracle: tests/oracles/freeze.py (grid-zoom likelihood maximizer)
    ("probit", [0.44137268711796035, 0.8696785208131911]),
    ("logit", [0.7473061936599272, 1.4518396616240898]),
])
def test_golden_glm_matches_brute_force(link, expected):
    X, z = golden_glm_rows()
    fit = fit_binary_glm(X, z, link)
    assert fit.converged
    np.testing.assert_allclose(fit.coefficients, expected, atol=1e-4)
    assert fit.loglik <= 0.0
    assert fit.loglik == pytest.approx(brute.binary_loglik(fit.coefficients, X, z, link), rel=1e-10)


def test_rank_deficient_design():
    x = np.ones(20)
    X = np.column_stack([np.ones(20), x])
    z = np.r_[np.ones(10), np.zeros(10)]
    with pytest.raises(RankDeficientDesign):
        fit_binary_glm(X, z, "probit")


def test_separation_reported_not_raised():
    x = np.linspace(-1, 1, 40)
    z = (x > 0).astype(float)
    with pytest.warns(SeparationWarning):
        fit = fit_binary_glm(add_intercept(x), z, "logit")
    assert not fit.converged
    assert np.all(np.isfinite(fit.coefficients))


def _glm_case(seed, link):
    rng = np.random.default_rng(seed)
    n, k = 120, 3
    X = add_intercept(rng.normal(size=(n, k)))
    beta = rng.normal(size=k + 1) * 0.5
    eta = X @ beta
    p = 1 / (1 + np.exp(-eta)) if link == "logit" else 0.5 * (1 + np.vectorize(math.erf)(eta / math.sqrt(2)))
    z = (rng.uniform(size=n) < p).astype(float)
    return X, z


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["probit", "logit"]))
def test_score_at_optimum_and_finite_differences(seed, link):
    X, z = _glm_case(seed, link)
    fit = fit_binary_glm(X, z, link)
    if fit.converged:
        assert np.max(np.abs(glm_score(fit.coefficients, X, z, link))) <= 1e-6
    rng = np.random.default_rng(seed + 1)
    b = rng.normal(size=X.shape[1]) * 0.3
    g = glm_score(b, X, z, link)
    h = 1e-5
    fd = np.array([(glm_loglik(b + h * e, X, z, link) - glm_loglik(b - h * e, X, z, link)) / (2 * h)
                   for e in np.eye(b.size)])
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-5 * (1 + np.abs(g).max()))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["probit", "logit"]))
def test_loglik_concave_along_lines(seed, link):
    X, z = _glm_case(seed, link)
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, X.shape[1]))
    for t in (0.25, 0.5, 0.75):
        mid = glm_loglik(a + t * (b - a), X, z, link)
        assert mid >= min(glm_loglik(a, X, z, link), glm_loglik(b, X, z, link)) - 1e-9


def test_cue_exactly_identified_linear():
    c = np.array([0.4, -1.2])
    rng = np.random.default_rng(1)
    noise = rng.normal(size=(200, 2))
    noise -= noise.mean(axis=0)

    def moments(b):
        return noise + (np.asarray(b) - c)

    fit = minimize_cue_gmm(moments, np.zeros(2))
    np.testing.assert_allclose(fit.coefficients, c, atol=1e-6)
    assert fit.objective == pytest.approx(0.0, abs=1e-10)


def test_cue_matches_grid_oracle():
    # oracle: tests/oracles/freeze.py (shrinking dense grid on the CUE criterion)
    moments, _ = cue_problem()
    fit = minimize_cue_gmm(moments, np.zeros(2))
    np.testing.assert_allclose(fit.coefficients, [0.7387830169650229, 1.3679571143578662], atol=1e-3)
    assert fit.objective >= 0.0


def test_cue_init_at_minimizer_converges_quickly():
    c = np.array([0.5, 2.0])

    def moments(b):
        r = np.asarray(b) - c
        return np.tile(r, (50, 1)) + np.outer(np.linspace(-1, 1, 50), [1.0, -1.0])

    fit = minimize_cue_gmm(moments, c, GmmOptions(restarts=0))
    assert fit.converged
    np.testing.assert_allclose(fit.coefficients, c, atol=1e-6)


def test_cue_objective_not_above_start():
    moments, _ = cue_problem()
    start = np.array([0.0, 0.0])
    fit = minimize_cue_gmm(moments, start)
    assert fit.objective <= cue_objective(moments(start)) + 1e-15


def test_cue_objective_invariant_to_moment_mixing():
    moments, _ = cue_problem()
    g = moments(np.array([0.3, 1.1]))
    rng = np.random.default_rng(4)
    A = rng.normal(size=(3, 3)) + 3 * np.eye(3)
    a = cue_objective(g, ridge=0.0)
    b = cue_objective(g @ A, ridge=0.0)
    assert b == pytest.approx(a, rel=1e-6)
    assert cue_objective(g) == pytest.approx(brute.cue_value(g), rel=1e-10)


def test_cue_errors():
    with pytest.raises(NonFiniteObjective):
        cue_objective(np.array([[np.nan, 1.0], [1.0, 2.0]]))
    with pytest.raises(SingularWeighting):
        cue_objective(np.array([[1e300, 1.0], [1e300, 1.0]]), ridge=0.0)


def test_nelder_mead_rosenbrock():
    def f(v):
        return (1 - v[0]) ** 2 + 100 * (v[1] - v[0] ** 2) ** 2

    x, fx, conv, _ = nelder_mead(f, [-1.0, 1.0], xtol=1e-10, max_iter=5000)
    assert conv
    np.testing.assert_allclose(x, [1.0, 1.0], atol=1e-6)
