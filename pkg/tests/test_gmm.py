import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from abcrde.errors import AggregateFitError, FitRejectedError
from abcrde.gmm import (GaussianMixture, fit_gmm, gmm_bic, gmm_condition, gmm_log_density,
                        gmm_sample, select_gmm)


def random_mixture(rng, L, p):
    w = rng.dirichlet(np.ones(L))
    mu = rng.normal(scale=2.0, size=(L, p))
    covs = []
    for _ in range(L):
        A = rng.normal(size=(p, p))
        covs.append(A @ A.T + 0.5 * np.eye(p))
    return GaussianMixture(w, mu, np.array(covs))


def test_standard_normal_density_at_origin():
    g = GaussianMixture([1.0], np.zeros((1, 2)), np.eye(2)[None])
    assert gmm_log_density(g, np.zeros(2)) == pytest.approx(-math.log(2 * math.pi), abs=1e-14)


def test_log_density_matches_scipy():
    rng = np.random.default_rng(0)
    g = random_mixture(rng, 3, 3)
    x = rng.normal(size=(20, 3))
    ref = np.log(sum(w * stats.multivariate_normal(m, c).pdf(x)
                     for w, m, c in zip(g.weights, g.means, g.covariances)))
    np.testing.assert_allclose(g.log_density(x), ref, rtol=1e-12)


def test_weights_normalized_and_shape_errors():
    g = GaussianMixture([2.0, 2.0], np.zeros((2, 1)), np.ones((2, 1, 1)))
    np.testing.assert_allclose(g.weights, [0.5, 0.5])
    with pytest.raises(ValueError):
        GaussianMixture([1.0], np.zeros((2, 1)), np.ones((2, 1, 1)))
    with pytest.raises(FitRejectedError):
        GaussianMixture([1.0], np.zeros((1, 2)), -np.eye(2)[None])


@pytest.mark.parametrize("L", [1, 2, 3])
def test_condition_matches_grid_quadrature(L):
    rng = np.random.default_rng(L)
    g = random_mixture(rng, L, 2)
    pts = rng.normal(scale=1.5, size=(50, 2))
    for a, b in pts:
        cond = gmm_condition(g, [b], [1])
        got = math.exp(cond.log_density(np.array([a])))
        joint = math.exp(g.log_density(np.array([a, b])))
        marg, _ = integrate.quad(lambda t: math.exp(g.log_density(np.array([t, b]))),
                                 -np.inf, np.inf, epsabs=0, epsrel=1e-12, limit=200)
        assert got == pytest.approx(joint / marg, rel=1e-6)


def test_conditional_of_independent_blocks_is_marginal():
    cov = np.diag([2.0, 0.5])
    g = GaussianMixture([1.0], [[1.0, -1.0]], cov[None])
    c = gmm_condition(g, [7.0], [1])
    np.testing.assert_allclose(c.means, [[1.0]])
    np.testing.assert_allclose(c.covariances, [[[2.0]]])


def test_conditioning_index_errors():
    g = random_mixture(np.random.default_rng(1), 2, 3)
    with pytest.raises(ValueError):
        g.conditional([3])
    with pytest.raises(ValueError):
        g.conditional([0, 1, 2])
    with pytest.raises(ValueError):
        g.conditional([1, 1])


def test_sample_moments():
    rng = np.random.default_rng(2)
    g = random_mixture(rng, 2, 2)
    x = gmm_sample(g, 200_000, np.random.default_rng(3))
    mean = g.weights @ g.means
    cov = sum(w * (c + np.outer(m - mean, m - mean))
              for w, m, c in zip(g.weights, g.means, g.covariances))
    se = np.sqrt(np.diag(cov) / x.shape[0])
    assert np.all(np.abs(x.mean(axis=0) - mean) < 4 * se)
    np.testing.assert_allclose(np.cov(x, rowvar=False), cov, rtol=0.03, atol=0.02)


def test_single_component_recovers_sample_moments():
    rng = np.random.default_rng(4)
    X = rng.multivariate_normal([1.0, -2.0], [[2.0, 0.6], [0.6, 1.0]], size=5000)
    g = fit_gmm(X, 1)
    np.testing.assert_allclose(g.means[0], X.mean(axis=0), atol=1e-10)
    S = np.cov(X, rowvar=False, bias=True)
    ridge = 1e-6 * X.var(axis=0).mean()
    np.testing.assert_allclose(g.covariances[0], S + ridge * np.eye(2), rtol=1e-9)
    assert g.report.iterations <= 2


def test_bic_selects_two_separated_components():
    rng = np.random.default_rng(5)
    X = np.vstack([rng.normal(-5, 1, size=(1000, 2)), rng.normal(5, 1, size=(1000, 2))])
    g, table = select_gmm(X, [1, 2, 3], seed=1)
    assert g.n_components == 2
    assert [row["L"] for row in table] == [1, 2, 3]
    best = min(table, key=lambda r: r["bic"])
    assert best["bic"] == pytest.approx(gmm_bic(g, X.shape[0]))


def test_single_candidate_returned_unconditionally():
    X = np.random.default_rng(6).normal(size=(200, 2))
    g, table = select_gmm(X, [1])
    assert g.n_components == 1 and len(table) == 1


def test_parameter_count():
    g = random_mixture(np.random.default_rng(0), 3, 2)
    assert g.n_parameters() == 2 + 3 * (2 + 3)


@pytest.mark.parametrize("bad, fragment", [
    (np.ones((3, 2)), "insufficient rows"),
    (np.column_stack([np.arange(50.0), np.ones(50)]), "zero-variance column 1"),
    (np.column_stack([np.arange(50.0), np.r_[np.nan, np.arange(49.0)]]), "non-finite"),
])
def test_degenerate_input_rejected(bad, fragment):
    with pytest.raises(FitRejectedError, match=fragment):
        fit_gmm(bad, 1)


def test_all_candidates_rejected_aggregates():
    with pytest.raises(AggregateFitError):
        select_gmm(np.ones((5, 2)) + np.arange(5)[:, None], [3, 4])


def test_em_log_likelihood_non_decreasing():
    for r in range(20):
        rng = np.random.default_rng(r)
        L, p = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        X = rng.normal(size=(300, p)) + rng.choice([-3.0, 0.0, 3.0], size=(300, 1))
        tr = np.array(fit_gmm(X, L, restarts=1, seed=r, max_iter=200).report.trace)
        assert np.all(np.diff(tr) >= -1e-9 * np.maximum(1.0, np.abs(tr[1:])))


def test_fit_deterministic_and_serialization_bit_stable():
    X = np.random.default_rng(7).normal(size=(400, 3))
    a, b = fit_gmm(X, 2, seed=3), fit_gmm(X, 2, seed=3)
    np.testing.assert_array_equal(a.means, b.means)
    doc = json.loads(json.dumps(a.to_dict()))
    c = GaussianMixture.from_dict(doc)
    np.testing.assert_array_equal(c.covariances, a.covariances)
    np.testing.assert_array_equal(c.log_density(X), a.log_density(X))
    assert json.dumps(c.to_dict()) == json.dumps(a.to_dict())


def test_from_dict_rejects_wrong_version():
    doc = random_mixture(np.random.default_rng(0), 1, 1).to_dict()
    doc["version"] = "gmm/0"
    with pytest.raises(ValueError):
        GaussianMixture.from_dict(doc)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), L=st.integers(1, 3), p=st.integers(2, 4))
def test_conditional_density_is_joint_over_marginal(seed, L, p):
    rng = np.random.default_rng(seed)
    g = random_mixture(rng, L, p)
    x = rng.normal(size=p)
    given = np.array([p - 1])
    c = g.conditional(given)
    lhs = c.log_density(x[:-1], x[given])
    rhs = g.log_density(x) - g.marginal(given).log_density(x[given])
    assert lhs == pytest.approx(rhs, abs=1e-9)
