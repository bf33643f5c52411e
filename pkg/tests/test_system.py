#!/usr/bin/env python3
"""
Desk-scale end-to-end checks
Simulate-then-fit recovery, null control and predictive signal against the baselines
"""

import numpy as np
from scipy import stats

from src.analysis import node_diagnostics
from src.models import CVConfig, RunConfig, SamplerConfig
from src.prediction_engine import PredictionEngine, accuracy_frame
from src.sampler import fit_model, model_data, posterior_summary
from src.simulation import default_params, simulate

RECOVERY_SAMPLER = SamplerConfig(burn_in=1000, samples=2000, chains=4, inits=1, seed=17)


def _in_sample_cross_covariance(truth):
    Z = np.column_stack([truth.Y, truth.kappa])
    return np.cov(Z, rowvar=False)[:-1, -1]


def _fit(dataset, config=RECOVERY_SAMPLER):
    data = model_data(dataset, "Rest1", "synthetic")
    return fit_model(data, config, n_jobs=2)


def _cv(dataset, methods, repeats=5, burn_in=400, samples=400, seed=23, train_fraction=0.9):
    config = RunConfig(
        command="cv",
        sampler=SamplerConfig(burn_in=burn_in, samples=samples, chains=1, inits=1, seed=seed),
        cv=CVConfig(train_fraction=train_fraction, repeats=repeats, methods=methods),
        threads=2,
    )
    results = PredictionEngine(config, dataset).run_cv()
    frame = accuracy_frame(results.records).dropna(subset=["r"])
    return {method: group.to_numpy() for method, group in frame.groupby("method")["r"]}


def test_recovers_node_construct_covariances():
    dataset, truth = simulate(default_params(seed=1), seed=1)
    fit = _fit(dataset)
    estimated = posterior_summary(fit.draws).cov_mean
    realized = _in_sample_cross_covariance(truth)

    assert stats.spearmanr(estimated, realized)[0] >= 0.8
    signal = np.arange(6)
    np.testing.assert_array_equal(np.sign(estimated[signal]), np.sign(realized[signal]))
    # Population signs of the four strongest nodes
    np.testing.assert_array_equal(np.sign(estimated[:4]), np.sign(truth.cross_covariance[:4]))

    draws = np.stack([draw.cov for draw in fit.draws])
    diagnostics = node_diagnostics(draws)
    assert (diagnostics["rhat"] < 1.1).mean() >= 0.95


def test_null_cross_block_stays_near_zero():
    dataset, _ = simulate(default_params(cross=(), seed=2), seed=2)
    estimated = posterior_summary(_fit(dataset).draws).cov_mean
    assert np.mean(np.abs(estimated)) <= 0.1


def test_null_cross_block_does_not_predict():
    dataset, _ = simulate(default_params(V=15, n_subjects=500, cross=(), seed=3), seed=3)
    accuracy = _cv(dataset, ("latentsna",), burn_in=300, samples=300, train_fraction=0.75)
    assert len(accuracy["latentsna"]) > 0
    assert np.mean(np.abs(accuracy["latentsna"])) <= 0.15


def test_strong_signal_predicts_at_least_as_well_as_baselines():
    params = default_params(V=20, n_subjects=200, cross=(0.5, -0.5, 0.3, -0.3), sigma2_b=0.2, seed=4)
    dataset, _ = simulate(params, seed=4)
    accuracy = {method: np.mean(r) for method, r in _cv(dataset, ("latentsna", "cpm", "ridge")).items()}
    assert set(accuracy) == {"latentsna", "cpm", "ridge"}
    assert all(np.isfinite(value) for value in accuracy.values())
    assert accuracy["latentsna"] >= 0.5
    for baseline in ("cpm", "ridge"):
        assert accuracy["latentsna"] >= accuracy[baseline] - 0.05
