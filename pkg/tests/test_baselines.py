"""
Tests for the CPM and ridge baselines
"""

import numpy as np
import pytest

from src.baselines import (
    cpm_fit_predict,
    edge_p_values,
    permutation_p_values,
    ridge_fit_predict,
    ridge_solve,
    select_lambda,
)
from src.errors import AnalysisError
from src.rng import STREAM_PERMUTATION, make_rng


def test_edge_p_values_basics():
    rng = np.random.default_rng(0)
    y = rng.normal(size=30)
    edges = np.column_stack([y, -2 * y + 1, np.full(30, 4.0), rng.normal(size=30)])
    r, p = edge_p_values(edges, y)
    assert r[0] == pytest.approx(1.0)
    assert r[1] == pytest.approx(-1.0)
    assert p[0] < 1e-12 and p[1] < 1e-12
    assert r[2] == 0.0 and p[2] == 1.0
    assert 0.0 < p[3] <= 1.0
    with pytest.raises(AnalysisError, match="constant"):
        edge_p_values(edges, np.ones(30))


def test_permutation_p_values_flag_the_true_edge():
    rng = np.random.default_rng(1)
    y = rng.normal(size=40)
    edges = np.column_stack([y + 0.1 * rng.normal(size=40), rng.normal(size=40)])
    p = permutation_p_values(edges, y, n_perm=99, rng=make_rng(2, STREAM_PERMUTATION))
    assert p[0] == pytest.approx(0.01)
    assert p[1] > 0.01


def test_parametric_p_values_match_the_permutation_oracle():
    rng = np.random.default_rng(6)
    y = rng.normal(size=20)
    edges = np.column_stack([y + scale * rng.normal(size=20) for scale in (1.0, 2.0, 4.0)]
                            + [rng.normal(size=20) for _ in range(3)])
    n_perm = 4000
    _, parametric = edge_p_values(edges, y)
    empirical = permutation_p_values(edges, y, n_perm=n_perm, rng=make_rng(6, STREAM_PERMUTATION))
    tolerance = 4 * np.sqrt(parametric * (1 - parametric) / n_perm) + 0.01
    assert np.all(np.abs(empirical - parametric) <= tolerance)


def test_cpm_recovers_an_exact_edge():
    rng = np.random.default_rng(3)
    n_train, n_test, noise_edges = 50, 20, 20
    y = rng.normal(size=n_train + n_test)
    edges = np.column_stack([y, rng.normal(size=(n_train + n_test, noise_edges))])
    result = cpm_fit_predict(edges[:n_train], y[:n_train], edges[n_train:])
    assert not result.flagged
    assert result.detail["positive_edges"] >= 1
    assert np.corrcoef(result.predictions, y[n_train:])[0, 1] >= 0.95


def test_cpm_falls_back_to_training_mean(caplog):
    rng = np.random.default_rng(4)
    edges = rng.normal(size=(30, 10))
    y = rng.normal(size=30)
    result = cpm_fit_predict(edges[:20], y[:20], edges[20:], p_threshold=1e-300)
    assert result.flagged
    np.testing.assert_allclose(result.predictions, np.full(10, y[:20].mean()))
    assert "No edge passed" in caplog.text


def test_cpm_null_predictions_are_uninformative():
    rng = np.random.default_rng(5)
    edges = rng.normal(size=(200, 50))
    y = rng.normal(size=200)
    result = cpm_fit_predict(edges[:100], y[:100], edges[100:])
    if not result.flagged:
        assert abs(np.corrcoef(result.predictions, y[100:])[0, 1]) <= 0.3


def test_baselines_need_ten_training_subjects():
    edges = np.random.default_rng(6).normal(size=(9, 4))
    with pytest.raises(AnalysisError, match="10 training subjects"):
        cpm_fit_predict(edges, np.arange(9.0), edges)
    with pytest.raises(AnalysisError):
        ridge_fit_predict(edges, np.arange(9.0), edges, [1.0])


def test_ridge_primal_and_dual_agree():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(20, 5))
    y = rng.normal(size=20)
    primal = ridge_solve(X, y, 2.0)
    dual = X.T @ np.linalg.solve(X @ X.T + 2.0 * np.eye(20), y)
    np.testing.assert_allclose(primal, dual, atol=1e-10)
    np.testing.assert_allclose(ridge_solve(X, y, 0.0), np.linalg.lstsq(X, y, rcond=None)[0], atol=1e-10)


def test_ridge_interpolates_a_duplicated_subject():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(5, 8))
    y = rng.normal(size=5)
    coef = ridge_solve(X, y, 1e-8)
    assert X[2] @ coef == pytest.approx(y[2], abs=1e-5)

    edges = rng.normal(size=(12, 40))
    target = rng.normal(size=12)
    result = ridge_fit_predict(edges, target, edges[[3]], lambda_grid=[1e-6])
    assert result.predictions[0] == pytest.approx(target[3], abs=1e-3)


def test_huge_penalty_predicts_training_mean():
    rng = np.random.default_rng(9)
    edges = rng.normal(size=(40, 30))
    y = rng.normal(size=40)
    result = ridge_fit_predict(edges[:30], y[:30], edges[30:], lambda_grid=[1e9])
    assert result.detail["lambda"] == 1e9
    np.testing.assert_allclose(result.predictions, y[:30].mean(), atol=1e-4)


def test_lambda_selection_prefers_small_penalty_on_clean_signal():
    rng = np.random.default_rng(10)
    edges = rng.normal(size=(60, 5))
    y = edges @ np.array([1.0, -2.0, 0.5, 0.0, 0.0])
    lam, errors = select_lambda(edges, y, [1e-3, 1e3, 1e6], seed=1)
    assert lam == 1e-3
    assert errors[0] < errors[1] < errors[2]


def test_ridge_rejects_bad_grid():
    edges = np.random.default_rng(11).normal(size=(12, 3))
    with pytest.raises(AnalysisError, match="lambda_grid"):
        ridge_fit_predict(edges, np.arange(12.0), edges, [0.0])
