import datetime as dt

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, strategies as st

from callmix.designspace import ar1_kernel, unit_gaps
from callmix.gausslik import (
    CovarianceNotPD,
    DayBlockCovariance,
    DenseCovariance,
    ForecastSet,
    FutureBlock,
    LevelOutOfRange,
    SingularDesign,
    conditional_moments,
    fit_gls,
    gls,
    inverse_transform,
    log_likelihood,
    predict_blup,
    root_transform,
)


@pytest.mark.parametrize("n,y", [(0, 0.5), (2, 1.5), (500, 22.366269)])
def test_root_transform_examples(n, y):
    assert np.isclose(root_transform(n), y, atol=1e-6)


@pytest.mark.parametrize("y,n", [(1.5, 2.0), (0.4, 0.0), (22.366269, 500.0), (-3.0, 0.0)])
def test_inverse_transform_examples(y, n):
    assert np.isclose(inverse_transform(y), n, atol=1e-4)


@given(st.integers(0, 10**6))
def test_transform_round_trip(n):
    assert np.isclose(inverse_transform(root_transform(n)), n, rtol=1e-12, atol=1e-9)


@given(st.integers(100, 5000), st.integers(0, 2**31))
def test_transform_stabilizes_variance(lam, seed):
    y = root_transform(np.random.default_rng(seed).poisson(lam, 100_000))
    assert 0.24 <= y.var(ddof=1) <= 0.26


def _random_block(rng, D, K):
    A = rng.standard_normal((D, D))
    G = A @ A.T / D
    B = rng.standard_normal((K, K))
    R = B @ B.T / K + np.eye(K)
    return G, R


@given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 1000))
def test_day_block_matches_dense(D, K, seed):
    rng = np.random.default_rng(seed)
    G, R = _random_block(rng, D, K)
    op = DayBlockCovariance(G, R)
    V = op.dense()
    dense = DenseCovariance(V)
    B = rng.standard_normal((D * K, 3))
    assert np.allclose(op.solve(B), np.linalg.solve(V, B), atol=1e-8)
    assert np.isclose(op.logdet(), np.linalg.slogdet(V)[1])
    assert np.allclose(op.gram(B), B.T @ np.linalg.solve(V, B), atol=1e-8)
    assert np.allclose(dense.gram(B), op.gram(B), atol=1e-8)


def test_day_block_allows_zero_day_variance():
    op = DayBlockCovariance(np.zeros((3, 3)), 2.0 * np.eye(2))
    assert np.isclose(op.logdet(), 6 * np.log(2.0))


def test_not_positive_definite():
    with pytest.raises(CovarianceNotPD):
        DenseCovariance(np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(CovarianceNotPD):
        DayBlockCovariance(np.eye(2), -np.eye(2))


def test_ml_with_scalar_covariance_is_ols():
    rng = np.random.default_rng(1)
    X = np.column_stack([np.ones(40), rng.standard_normal(40)])
    y = X @ [1.0, 2.0] + rng.standard_normal(40)
    sol = gls(y, X, 0.7 * np.eye(40))
    assert np.allclose(sol.beta, np.linalg.lstsq(X, y, rcond=None)[0])


@given(st.integers(0, 10_000))
def test_reml_invariant_to_reparameterization(seed):
    rng = np.random.default_rng(seed)
    n = 30
    X = np.column_stack([np.ones(n), rng.standard_normal((n, 2))])
    y = rng.standard_normal(n)
    V = ar1_kernel(1.3, 0.4, unit_gaps(n)) + 0.2 * np.eye(n)
    A = rng.standard_normal((3, 3)) + 3 * np.eye(3)
    if abs(np.linalg.det(A)) < 1e-3:
        return
    a = log_likelihood(y, X, V, "reml")
    b = log_likelihood(y, X @ A, V, "reml")
    assert abs(a - b) < 1e-6


def test_reml_matches_one_way_anova():
    """Balanced one-way random effects: REML equals the ANOVA moment estimators."""
    rng = np.random.default_rng(4)
    D, K = 25, 6
    y = (3.0 + rng.normal(0, 1.2, D)[:, None] + rng.normal(0, 0.8, (D, K))).ravel()
    X = np.ones((D * K, 1))
    Y = y.reshape(D, K)
    msw = ((Y - Y.mean(1, keepdims=True)) ** 2).sum() / (D * (K - 1))
    msb = K * ((Y.mean(1) - Y.mean()) ** 2).sum() / (D - 1)
    sa2 = (msb - msw) / K
    assert sa2 > 0

    def V(th):
        return DayBlockCovariance(th["sa2"] * np.eye(D), th["se2"] * np.eye(K))

    fit = fit_gls(y, X, V, {"sa2": 1.0, "se2": 1.0}, {"sa2": "var", "se2": "var"})
    assert np.isclose(fit.theta["se2"], msw, rtol=1e-4)
    assert np.isclose(fit.theta["sa2"], sa2, rtol=1e-4)
    assert np.isclose(fit.beta[0], y.mean())


def test_singular_design_rejected():
    X = np.column_stack([np.ones(5), np.ones(5)])
    with pytest.raises(SingularDesign):
        fit_gls(np.arange(5.0), X, lambda th: th["s"] * np.eye(5), {"s": 1.0}, {"s": "var"})


def test_fixed_parameters_are_not_optimized():
    rng = np.random.default_rng(0)
    y = rng.standard_normal(20)
    X = np.ones((20, 1))
    fit = fit_gls(y, X, lambda th: th["a"] * np.eye(20) + th["b"] * np.ones((20, 20)),
                  {"a": 1.0, "b": 0.3}, {"a": "var", "b": "var"}, fixed={"b": 0.3})
    assert fit.theta["b"] == 0.3


def test_conditional_moments_match_brute_force():
    """Two observed cells, one future cell, fully specified covariance."""
    S = np.array([[1.5, 0.6, 0.3], [0.6, 1.5, 0.6], [0.3, 0.6, 1.5]])
    X_all = np.array([[1.0, 0.0], [1.0, 1.0], [1.0, 2.0]])
    y = np.array([2.0, 3.5])
    Vo, c, v0 = S[:2, :2], S[2, :2], S[2, 2]
    Xo, x0 = X_all[:2], X_all[2]
    Vi = np.linalg.inv(Vo)
    beta = np.linalg.inv(Xo.T @ Vi @ Xo) @ Xo.T @ Vi @ y
    mean = x0 @ beta + c @ Vi @ (y - Xo @ beta)
    b = x0 - Xo.T @ Vi @ c
    var = v0 - c @ Vi @ c + b @ np.linalg.inv(Xo.T @ Vi @ Xo) @ b
    m, v = conditional_moments(y, Xo, Vo, FutureBlock(X=x0[None, :], cross=c[None, :], var=np.array([v0])))
    assert np.isclose(m[0], mean) and np.isclose(v[0], var)
    _, v_known = conditional_moments(y, Xo, Vo, FutureBlock(x0[None, :], c[None, :], np.array([v0])), False)
    assert np.isclose(v_known[0], v0 - c @ Vi @ c)


def _toy_fit(rho, D=12, K=1, seed=0):
    rng = np.random.default_rng(seed)
    gaps = unit_gaps(D)
    V = ar1_kernel(1.0, rho, gaps) + 0.3 * np.eye(D) if rho else 1.3 * np.eye(D)
    y = 5 + rng.multivariate_normal(np.zeros(D), V)
    X = np.ones((D, 1))
    return y, X, V


def test_independence_gives_fixed_effect_forecast():
    y, X, V = _toy_fit(0.0)
    m, _ = conditional_moments(y, X, V, FutureBlock(np.ones((1, 1)), np.zeros((1, len(y))), np.array([1.3])))
    assert np.isclose(m[0], y.mean())


def test_lead_time_shrinks_day_effect_by_ar1_power():
    rho = 0.6
    y, X, V = _toy_fit(rho)
    D = len(y)
    pos = np.arange(D)

    def shift(lead):
        cross = ar1_kernel(1.0, rho, np.abs(D - 1 + lead - pos))[None, :]
        m, _ = conditional_moments(y, X, V, FutureBlock(np.ones((1, 1)), cross, np.array([1.3])))
        return m[0] - gls(y, X, V).beta[0]

    assert np.isclose(shift(7) / shift(1), rho**6)


def _forecast(level):
    y, X, V = _toy_fit(0.6, D=10)
    cross = ar1_kernel(1.0, 0.6, np.abs(10 - np.arange(10)))[None, :]
    dates = [dt.date(2004, 1, 4)]
    fut = FutureBlock(np.ones((1, 1)), cross, np.array([1.3]), dates, [1])
    return predict_blup(None, y * 4, X, V, fut, level)


@given(st.floats(0.05, 0.9), st.floats(0.01, 0.09))
def test_wider_level_wider_interval(level, bump):
    a, b = _forecast(level).frame.iloc[0], _forecast(level + bump).frame.iloc[0]
    assert b.lower <= a.lower and b.upper >= a.upper
    assert a.lower <= a.point <= a.upper


def test_level_out_of_range():
    with pytest.raises(LevelOutOfRange):
        _forecast(1.0)


def test_forecast_set_round_trip(tmp_path):
    fs = _forecast(0.95)
    fs.to_csv(tmp_path / "f.csv")
    back = ForecastSet.read_csv(tmp_path / "f.csv")
    assert np.allclose(back.frame[["point", "lower", "upper"]], fs.frame[["point", "lower", "upper"]], atol=1e-6)


def test_forecast_set_rejects_bad_order():
    frame = pd.DataFrame({"date": [dt.date(2004, 1, 4)], "period": [1], "point": [5.0], "lower": [6.0],
                          "upper": [7.0], "point_transformed": [2.3], "sd_transformed": [0.1]})
    with pytest.raises(ValueError):
        ForecastSet(frame)
