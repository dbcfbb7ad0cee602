import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from abcrde.errors import FitRejectedError
from abcrde.moe import (CDF_EPS, MoEModel, moe_bic, moe_cdf, moe_density, moe_fit, normal_score,
                        select_moe)


def generator_sample(n, rng):
    """Two experts: gate logits (2 theta, -2 theta), means (-theta, theta), unit variance."""
    theta = rng.uniform(-2.0, 2.0, size=n)
    p1 = 1.0 / (1.0 + np.exp(-4.0 * theta))
    first = rng.uniform(size=n) < p1
    s = np.where(first, -theta, theta) + rng.standard_normal(n)
    return theta[:, None], s


def generator_density(s, theta):
    p1 = 1.0 / (1.0 + math.exp(-4.0 * theta))
    return p1 * stats.norm.pdf(s, -theta) + (1 - p1) * stats.norm.pdf(s, theta)


@pytest.fixture(scope="module")
def generator_fit():
    theta, s = generator_sample(20_000, np.random.default_rng(0))
    return moe_fit(theta, s, 2, seed=1), theta, s


def test_recovers_generator_density(generator_fit):
    model, _, _ = generator_fit
    grid = np.linspace(-5, 5, 101)
    for th in (-1.0, 0.0, 1.0):
        got = moe_density(model, grid, np.array([th]))
        assert np.max(np.abs(got - generator_density(grid, th))) < 0.05


def test_held_out_scores_are_standard_normal(generator_fit):
    model, _, _ = generator_fit
    theta, s = generator_sample(5000, np.random.default_rng(99))
    u = normal_score(model, s, theta)
    assert stats.kstest(u, "norm").pvalue > 0.01


def test_cdf_derivative_is_density(generator_fit):
    model, _, _ = generator_fit
    th = np.array([0.3])
    s = np.linspace(-3, 3, 13)
    h = 1e-5
    fd = (moe_cdf(model, s + h, th) - moe_cdf(model, s - h, th)) / (2 * h)
    np.testing.assert_allclose(fd, moe_density(model, s, th), rtol=1e-6, atol=1e-9)


def test_density_integrates_to_one(generator_fit):
    model, _, _ = generator_fit
    grid = np.linspace(-15, 15, 30001)
    dens = moe_density(model, grid, np.array([0.7]))
    assert integrate.trapezoid(dens, grid) == pytest.approx(1.0, abs=1e-6)


def test_em_trace_non_decreasing(generator_fit):
    tr = np.array(generator_fit[0].report.trace)
    assert np.all(np.diff(tr) >= -1e-9 * np.maximum(1.0, np.abs(tr[1:])))


def test_em_trace_non_decreasing_randomized():
    for r in range(20):
        rng = np.random.default_rng(r)
        th = rng.uniform(-2, 2, size=(300, 1))
        s = th[:, 0] * rng.choice([-1, 1], size=300) + 0.5 * rng.normal(size=300)
        m = moe_fit(th, s, int(rng.integers(1, 4)), restarts=1, seed=r, max_iter=100)
        tr = np.array(m.report.trace)
        assert np.all(np.diff(tr) >= -1e-9 * np.maximum(1.0, np.abs(tr[1:])))


def test_single_expert_mean_is_weighted_least_squares():
    rng = np.random.default_rng(3)
    th = rng.uniform(-1, 1, size=(2000, 2))
    s = 1.0 + th @ [2.0, -1.0] + 0.3 * rng.standard_normal(2000)
    m = moe_fit(th, s, 1)
    _, mu, sd, _ = m.components(th)
    X = np.column_stack([np.ones(2000), th])
    w = 1.0 / sd[:, 0] ** 2
    beta = np.linalg.solve((X.T * w) @ X, (X.T * w) @ s)
    np.testing.assert_allclose(mu[:, 0], X @ beta, atol=1e-6)
    np.testing.assert_allclose(np.median(sd), 0.3, rtol=0.05)


def test_translation_equivariance():
    theta, s = generator_sample(2000, np.random.default_rng(4))
    a = moe_fit(theta, s, 2, seed=5)
    b = moe_fit(theta, s + 3.0, 2, seed=5)
    np.testing.assert_allclose(b.mean[:, 0], a.mean[:, 0] + 3.0, atol=1e-6)
    np.testing.assert_allclose(b.mean[:, 1:], a.mean[:, 1:], atol=1e-6)
    np.testing.assert_allclose(b.gate, a.gate, atol=1e-6)
    np.testing.assert_allclose(b.logvar, a.logvar, atol=1e-6)


def test_bic_selection_table():
    theta, s = generator_sample(3000, np.random.default_rng(6))
    m, table = select_moe(theta, s, [1, 2, 3], seed=0)
    assert m.n_experts >= 2
    assert [r["J"] for r in table] == [1, 2, 3]
    assert moe_bic(m, 3000) == pytest.approx(min(r["bic"] for r in table))


def test_parameter_count():
    m = moe_fit(*generator_sample(500, np.random.default_rng(1)), 3, restarts=1)
    d = 1
    assert m.n_parameters() == 2 * (d + 1) + 3 * (2 * d + 2)


@pytest.mark.parametrize("J, n", [(2, 10), (1, 5)])
def test_insufficient_rows(J, n):
    th = np.linspace(0, 1, n)[:, None]
    with pytest.raises(FitRejectedError, match="insufficient rows"):
        moe_fit(th, np.sin(th[:, 0] * 7), J)


def test_constant_theta_rejected():
    with pytest.raises(FitRejectedError, match="zero variance"):
        moe_fit(np.ones((100, 1)), np.arange(100.0), 1)


def test_extreme_scores_are_clamped_and_finite(generator_fit):
    model = generator_fit[0]
    u, clamps = model.normal_score(np.array([-1e6, 0.0, 1e6]), np.array([0.0]), return_clamps=True)
    assert np.all(np.isfinite(u)) and clamps == 2
    assert u[0] == pytest.approx(stats.norm.ppf(CDF_EPS))
    assert u[2] == pytest.approx(-stats.norm.ppf(CDF_EPS))


def test_right_tail_scores_keep_precision(generator_fit):
    model = generator_fit[0]
    s = np.array([5.0, 6.0, 6.5])
    u = model.normal_score(s, np.array([0.0]))
    assert np.all(np.diff(u) > 0) and np.all(u > 4)


def test_serialization_round_trip(generator_fit):
    model = generator_fit[0]
    clone = MoEModel.from_dict(json.loads(json.dumps(model.to_dict())))
    th = np.array([[0.2], [-1.0]])
    np.testing.assert_array_equal(clone.log_density([0.5, 1.0], th), model.log_density([0.5, 1.0], th))


def test_first_gate_row_must_be_zero():
    with pytest.raises(ValueError):
        MoEModel([[1.0, 0.0]], [[0.0, 1.0]], [[0.0, 0.0]], [0.0], [1.0])


@settings(max_examples=50, deadline=None)
@given(s1=st.floats(-8, 8), ds=st.floats(1e-6, 8), th=st.floats(-2, 2))
def test_cdf_monotone_and_scores_increasing(generator_fit, s1, ds, th):
    model = generator_fit[0]
    t = np.array([th])
    f1, f2 = moe_cdf(model, s1, t), moe_cdf(model, s1 + ds, t)
    assert f1 <= f2
    u1, u2 = model.normal_score(s1, t), model.normal_score(s1 + ds, t)
    if CDF_EPS < f1 and f2 < 1 - CDF_EPS and f2 > f1:
        assert u1 < u2


def test_score_and_log_density_agree(generator_fit):
    model = generator_fit[0]
    theta, s = generator_sample(100, np.random.default_rng(8))
    u, lp, _ = model.score_and_log_density(s, theta)
    np.testing.assert_allclose(u, model.normal_score(s, theta), rtol=1e-13)
    np.testing.assert_allclose(lp, model.log_density(s, theta), rtol=1e-13)
