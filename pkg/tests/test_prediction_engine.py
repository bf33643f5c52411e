"""
Tests for splits, accuracy scoring, per-split fits and run orchestration
"""

import numpy as np
import pandas as pd
import pytest

from src.errors import AnalysisError, ConfigError
from src.models import AccuracyRecord, CVConfig, RunConfig, SamplerConfig
from src.prediction_engine import (
    PREDICTION_COLUMNS,
    PredictionEngine,
    accuracy_mean,
    accuracy_table,
    baseline_predict,
    fit_predict,
    pearson,
    split_folds,
    split_hash,
)
from src.simulation import default_params, simulate


@pytest.fixture
def cv_study():
    params = default_params(V=5, n_subjects=20, P=2, cross=(0.6, -0.5), sigma2_c=0.1, sigma2_b=0.2,
                            conditions=("Rest1", "SST"), seed=12)
    dataset, _ = simulate(params, seed=12)
    return dataset


def _quick_sampler(seed=3):
    return SamplerConfig(burn_in=10, samples=10, chains=1, inits=1, seed=seed)


# ==============================================================================
# --- SPLITS ---
# ==============================================================================

def test_split_sizes():
    plan = split_folds(10, train_fraction=0.9, repeats=5, seed=1)
    assert len(plan.repeats) == 5
    assert all(len(test) == 1 and len(train) == 9 for train, test in plan.repeats)

    plan = split_folds(190, train_fraction=0.9, repeats=3, seed=1)
    assert all(len(train) == 171 and len(test) == 19 for train, test in plan.repeats)


def test_splits_are_disjoint_and_cover_everyone():
    ids = [f"sub{i:03d}" for i in range(37)]
    for train, test in split_folds(ids, 0.8, repeats=4, seed=2).repeats:
        assert not set(train) & set(test)
        assert sorted(train + test) == ids


def test_split_determinism_and_hash():
    first = split_folds(50, 0.9, 5, seed=7)
    second = split_folds(50, 0.9, 5, seed=7)
    other = split_folds(50, 0.9, 5, seed=8)
    assert first.repeats == second.repeats
    assert split_hash(first) == split_hash(second)
    assert split_hash(first) != split_hash(other)


def test_partitioned_folds_cover_each_subject_once():
    plan = split_folds(25, train_fraction=0.8, repeats=99, seed=3, partitioned=True)
    assert len(plan.repeats) == 5
    held = [subject for _, test in plan.repeats for subject in test]
    assert sorted(held) == sorted(str(i) for i in range(25))


def test_split_rejects_bad_settings():
    with pytest.raises(ConfigError):
        split_folds(20, train_fraction=0.95)
    with pytest.raises(ConfigError):
        split_folds(20, train_fraction=0.5)
    with pytest.raises(ConfigError, match="subjects"):
        split_folds(9)


# ==============================================================================
# --- SCORING ---
# ==============================================================================

def test_pearson_examples():
    assert pearson([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0)
    assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert pearson([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8)
    with pytest.raises(AnalysisError, match="constant"):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(AnalysisError):
        pearson([1, 2], [2, 1])


def _prediction_frame(conditions, indicators, repeats, n_test=4, perfect=True, seed=0):
    rng = np.random.default_rng(seed)
    rows = []
    for condition in conditions:
        for indicator in indicators:
            for repeat in range(repeats):
                observed = rng.normal(size=n_test)
                predicted = observed if perfect else rng.normal(size=n_test)
                for k in range(n_test):
                    rows.append(["latentsna", condition, "mood", indicator, repeat, f"s{k}",
                                 predicted[k], observed[k], np.nan, "h"])
    return pd.DataFrame(rows, columns=PREDICTION_COLUMNS)


def test_accuracy_table_counts_and_identity():
    conditions = ["Rest1", "Rest2", "Average", "gradCPT", "EN-back", "SST", "Eyes"]
    indicators = ["a", "b", "c", "d"]
    records, mean = accuracy_table(_prediction_frame(conditions, indicators, 5))
    assert len(records) == 140
    assert all(record.r == pytest.approx(1.0) for record in records)
    assert len(mean) == 28
    assert set(mean["n_repeats"]) == {5}


def test_accuracy_mean_of_two_repeats():
    records = [AccuracyRecord("Rest1", "mood", "a", 0, 0.2, 8), AccuracyRecord("Rest1", "mood", "a", 1, 0.4, 8)]
    mean = accuracy_mean(records)
    assert mean.loc[0, "r"] == pytest.approx(0.3)
    assert mean.loc[0, "n_repeats"] == 2


def test_mean_accuracy_ignores_repeat_order():
    rng = np.random.default_rng(4)
    records = [AccuracyRecord(condition, "mood", indicator, repeat, float(rng.uniform(-0.9, 0.9)), 8)
               for condition in ("Rest1", "SST") for indicator in ("a", "b") for repeat in range(5)]
    shuffled = [records[i] for i in rng.permutation(len(records))]
    pd.testing.assert_frame_equal(accuracy_mean(shuffled), accuracy_mean(records), check_exact=False, rtol=1e-12)


def test_accuracy_record_invariants():
    with pytest.raises(AnalysisError, match="outside"):
        AccuracyRecord("Rest1", "mood", "a", 0, 1.5, 8)
    with pytest.raises(AnalysisError, match="pairs"):
        AccuracyRecord("Rest1", "mood", "a", 0, 0.5, 2)
    undefined = AccuracyRecord("Rest1", "mood", "a", 0, float("nan"), 2)
    assert np.isnan(undefined.r)


def test_accuracy_table_reports_missing_cells():
    frame = _prediction_frame(["Rest1"], ["a"], 2)
    expected = [("latentsna", "Rest1", "mood", "a", r) for r in range(3)]
    with pytest.raises(AnalysisError, match="1 prediction cells missing"):
        accuracy_table(frame, expected)


def test_constant_predictions_give_nan_with_warning(caplog):
    frame = _prediction_frame(["Rest1"], ["a"], 1)
    frame["predicted"] = 0.5
    records, _ = accuracy_table(frame)
    assert np.isnan(records[0].r)
    assert "undefined" in caplog.text


# ==============================================================================
# --- PER-SPLIT FITS ---
# ==============================================================================

def test_fit_predict_table(cv_study):
    subjects = sorted(cv_study.panel("synthetic").subject_ids)
    train, test = split_folds(subjects, 0.85, repeats=1, seed=0).repeats[0]
    frame, fit = fit_predict(cv_study, "Rest1", "synthetic", (train, test), _quick_sampler(), plan_hash="abc")
    assert list(frame.columns) == PREDICTION_COLUMNS
    assert len(frame) == len(test) * 2
    assert set(frame["subject_id"]) == set(test)
    assert np.all(np.isfinite(frame["predicted"]))
    assert set(frame["split_hash"]) == {"abc"}
    assert fit.draws[0].designated_ids == sorted(test)


def test_fit_predict_never_reads_masked_behaviors(cv_study):
    subjects = sorted(cv_study.panel("synthetic").subject_ids)
    split = split_folds(subjects, 0.85, repeats=1, seed=0).repeats[0]
    before, _ = fit_predict(cv_study, "Rest1", "synthetic", split, _quick_sampler())
    panel = cv_study.panel("synthetic")
    for subject in split[1]:
        panel.values[panel.index_of(subject)] += 100.0
    after, _ = fit_predict(cv_study, "Rest1", "synthetic", split, _quick_sampler())
    assert before["predicted"].to_numpy().tobytes() == after["predicted"].to_numpy().tobytes()


def test_fit_predict_rejects_foreign_subjects(cv_study):
    with pytest.raises(ConfigError, match="outside"):
        fit_predict(cv_study, "Rest1", "synthetic", (["sub001"], ["nobody"]), _quick_sampler())


def test_baseline_predict_ridge(cv_study):
    subjects = sorted(cv_study.panel("synthetic").subject_ids)
    split = split_folds(subjects, 0.85, repeats=1, seed=0).repeats[0]
    frame, details = baseline_predict(cv_study, "Rest1", "synthetic", split, "ridge", CVConfig())
    assert set(frame["method"]) == {"ridge"}
    assert frame["construct"].isna().all()
    assert [d["indicator"] for d in details] == ["indicator1", "indicator2"]
    assert all(d["lambda"] in CVConfig().ridge_lambdas for d in details)
    with pytest.raises(ConfigError):
        baseline_predict(cv_study, "Rest1", "synthetic", split, "lasso", CVConfig())


# ==============================================================================
# --- ENGINE ---
# ==============================================================================

def _engine(dataset, command="cv", **cv):
    cv_config = CVConfig(train_fraction=0.85, repeats=2, **cv)
    return PredictionEngine(RunConfig(command=command, sampler=_quick_sampler(), cv=cv_config), dataset)


def test_run_cv_collects_every_cell(cv_study):
    results = _engine(cv_study, methods=("latentsna", "ridge")).run_cv()
    # 2 methods x 2 conditions x 2 indicators x 2 repeats
    assert len(results.records) == 16
    assert {record.method for record in results.records} == {"latentsna", "ridge"}
    assert set(results.summaries) == {("Rest1", "synthetic"), ("SST", "synthetic")}
    assert len(results.traces) == 4
    assert list(results.split_hashes) == ["synthetic"]
    assert len(results.restarts) == 4
    assert set(results.predictions["split_hash"]) == {results.split_hashes["synthetic"]}


def test_run_cv_is_deterministic(cv_study):
    first = _engine(cv_study).run_cv()
    second = _engine(cv_study).run_cv()
    pd.testing.assert_frame_equal(first.predictions, second.predictions)
    for cell, summary in first.summaries.items():
        assert summary.cov_mean.tobytes() == second.summaries[cell].cov_mean.tobytes()


def test_run_fit_and_cell_filters(cv_study):
    engine = _engine(cv_study, command="fit")
    engine.config.conditions = ["SST"]
    results = engine.run_fit()
    assert list(results.summaries) == [("SST", "synthetic")]
    assert results.records == []

    engine.config.conditions = ["Rest9"]
    with pytest.raises(ConfigError, match="Rest9"):
        engine.resolve_cells()
