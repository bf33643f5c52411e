"""
Tests for biomarkers, network counts, regressions, diagnostics and run analysis
"""

import logging

import numpy as np
import pytest

from src.analysis import (
    SIGNIF_LEGEND,
    accuracy_distribution,
    accuracy_matrix,
    analyze_run,
    condition_effect_regression,
    covariance_strength,
    ess,
    label_effect_regression,
    network_counts,
    node_diagnostics,
    ols,
    render_regression,
    rest_task_average,
    rhat,
    sig_code,
    top_biomarkers,
)
from src.errors import AnalysisError
from src.models import CANONICAL_CONDITIONS, AccuracyRecord, Atlas, AtlasEntry, PosteriorDraws, PosteriorSummary
from src.sampler import trace_frame
from src.simulation import synthetic_atlas


def _summary(values):
    values = np.asarray(values, dtype=float)
    V = len(values)
    return PosteriorSummary(node_ids=list(range(1, V + 1)), cov_mean=values, cov_sd=np.zeros(V),
                            ci05=values, ci95=values)


def _atlas(labels):
    return Atlas([AtlasEntry(node_id=v, network=label) for v, label in enumerate(labels, start=1)])


# ==============================================================================
# --- BIOMARKERS ---
# ==============================================================================

def test_top_biomarkers_example():
    biomarkers = top_biomarkers(_summary([0.3, -0.4, 0.1, -0.2, 0.5]), k=2)
    assert biomarkers.positive == [5, 1]
    assert biomarkers.negative == [2, 4]


def test_top_biomarkers_ignore_input_order():
    rng = np.random.default_rng(9)
    values = np.round(rng.normal(size=30), 1)
    reference = top_biomarkers(_summary(values), k=5)
    order = rng.permutation(30)
    shuffled = PosteriorSummary(node_ids=[int(i) + 1 for i in order], cov_mean=values[order],
                                cov_sd=np.zeros(30), ci05=values[order], ci95=values[order])
    again = top_biomarkers(shuffled, k=5)
    assert again.positive == reference.positive
    assert again.negative == reference.negative


def test_top_biomarkers_ties_and_boundaries():
    tied = top_biomarkers(_summary([0.2] * 6), k=3)
    assert tied.positive == [1, 2, 3]
    assert tied.negative == [4, 5, 6]
    empty = top_biomarkers(_summary([0.1, 0.2]), k=0)
    assert empty.positive == [] and empty.negative == []
    with pytest.raises(AnalysisError):
        top_biomarkers(_summary([0.1, 0.2, 0.3]), k=2)


def test_network_counts():
    values = np.linspace(-1, 1, 20)
    single = network_counts(top_biomarkers(_summary(values), k=10), _atlas(["Fronto-parietal"] * 20))
    assert single["Fronto-parietal"] == 20
    assert sum(single.values()) == 20

    split = network_counts(top_biomarkers(_summary(values), k=10), _atlas(["Motor"] * 12 + ["Limbic"] * 8))
    assert split["Motor"] == 12 and split["Limbic"] == 8

    empty = network_counts(top_biomarkers(_summary(values), k=0), _atlas(["Motor"] * 20))
    assert set(empty.values()) == {0}


def test_rest_task_average():
    counts = {condition: {"Fronto-parietal": 2} for condition in ("gradCPT", "EN-back", "SST", "Eyes")}
    counts["Rest1"] = {"Fronto-parietal": 6}
    counts["Rest2"] = {"Fronto-parietal": 5}
    averaged = rest_task_average(counts)
    assert averaged["rest"]["Fronto-parietal"] == pytest.approx(5.5)
    assert averaged["task"]["Fronto-parietal"] == pytest.approx(2.0)
    assert averaged["rest"]["Motor"] == 0.0
    del counts["SST"]
    with pytest.raises(AnalysisError, match="SST"):
        rest_task_average(counts)


# ==============================================================================
# --- REGRESSIONS ---
# ==============================================================================

def test_ols_exact_fit():
    x = np.arange(6, dtype=float)
    result = ols(2 + 3 * x, np.column_stack([np.ones(6), x]), ["(Intercept)", "x"])
    assert result.coefficients["(Intercept)"].estimate == pytest.approx(2.0)
    assert result.coefficients["x"].estimate == pytest.approx(3.0)
    assert result.r_squared == pytest.approx(1.0)


def test_ols_matches_normal_equations():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n, q = int(rng.integers(8, 30)), int(rng.integers(2, 6))
        X = np.column_stack([np.ones(n), rng.normal(size=(n, q - 1))])
        y = X @ rng.normal(size=q) + rng.normal(size=n)
        gram = np.linalg.inv(X.T @ X)
        beta = gram @ X.T @ y
        residual = y - X @ beta
        sigma2 = residual @ residual / (n - q)
        errors = np.sqrt(np.diag(sigma2 * gram))
        r_squared = 1 - residual @ residual / ((y - y.mean()) @ (y - y.mean()))

        result = ols(y, X)
        terms = list(result.coefficients.values())
        np.testing.assert_allclose([t.estimate for t in terms], beta, atol=1e-8)
        np.testing.assert_allclose([t.std_error for t in terms], errors, atol=1e-8)
        assert result.r_squared == pytest.approx(r_squared, abs=1e-8)
        assert result.residual_df == n - q


def test_ols_names_collinear_columns():
    x = np.arange(8, dtype=float)
    design = np.column_stack([np.ones(8), x, 2 * x])
    with pytest.raises(AnalysisError, match="twice"):
        ols(x, design, ["(Intercept)", "x", "twice"])


def test_ols_constant_response_has_zero_r_squared():
    x = np.arange(8, dtype=float)
    result = ols(np.full(8, 0.4), np.column_stack([np.ones(8), x]))
    assert result.r_squared == 0.0
    assert result.coefficients["x1"].estimate == pytest.approx(0.0, abs=1e-12)


def test_sig_codes_at_thresholds():
    assert sig_code(0.0005) == "***"
    for threshold, below, at in ((0.001, "***", "**"), (0.01, "**", "*"), (0.05, "*", "."), (0.1, ".", " ")):
        assert sig_code(threshold - 1e-12) == below
        assert sig_code(threshold) == at
        assert sig_code(threshold + 1e-12) == at
    assert sig_code(float("nan")) == " "


def _records(shift=None, noise=0.02, category="mood", conditions=CANONICAL_CONDITIONS, seed=0):
    rng = np.random.default_rng(seed)
    records = []
    for condition in conditions:
        for indicator in ("a", "b", "c", "d"):
            for repeat in range(5):
                r = 0.3 + (shift if condition == "EN-back" and shift is not None else 0.0)
                records.append(AccuracyRecord(condition, category, indicator, repeat,
                                              r + noise * rng.normal(), 8))
    return records


def test_condition_effect_recovers_a_shift():
    model = condition_effect_regression(_records(shift=-0.19), "mood")
    assert model.dummies == ["Rest2", "Average", "EN-back", "SST", "Eyes", "gradCPT"]
    term = model.result.coefficients["EN-back"]
    assert abs(term.estimate + 0.19) <= 2 * term.std_error + 1e-12
    assert model.result.n == 28

    per_repeat = condition_effect_regression(_records(shift=-0.19), "mood", average_repeats=False)
    assert per_repeat.result.n == 140


def test_condition_effect_without_variation():
    model = condition_effect_regression(_records(noise=0.0), "mood")
    for dummy in model.dummies:
        assert model.result.coefficients[dummy].estimate == pytest.approx(0.0, abs=1e-12)
    assert model.result.r_squared == 0.0


def test_condition_effect_needs_every_condition():
    records = [rec for rec in _records() if rec.condition != "gradCPT"]
    with pytest.raises(AnalysisError, match="gradCPT"):
        condition_effect_regression(records, "mood")


def test_label_effect_exact_network_differences(caplog):
    atlas = _atlas(["Default Mode"] * 3 + ["Motor"] * 3 + ["Limbic"] * 3)
    values = [0.1] * 3 + [0.3] * 3 + [-0.2] * 3
    with caplog.at_level(logging.WARNING):
        result = label_effect_regression(values, atlas)
    assert result.coefficients["(Intercept)"].estimate == pytest.approx(0.1)
    assert result.coefficients["Motor"].estimate == pytest.approx(0.2)
    assert result.coefficients["Limbic"].estimate == pytest.approx(-0.3)
    assert result.r_squared == pytest.approx(1.0)
    assert "Visual I" not in result.coefficients
    assert "dropped" in caplog.text


def test_label_effect_absolute_and_flat():
    atlas = synthetic_atlas(20)
    rng = np.random.default_rng(3)
    negative = -np.abs(rng.normal(size=20))
    absolute = label_effect_regression(negative, atlas, use_absolute=True)
    flipped = label_effect_regression(-negative, atlas)
    for name, term in absolute.coefficients.items():
        assert term.estimate == pytest.approx(flipped.coefficients[name].estimate)

    flat = label_effect_regression(np.full(20, 0.05), atlas)
    for name, term in flat.coefficients.items():
        if name != "(Intercept)":
            assert term.estimate == pytest.approx(0.0, abs=1e-12)


def test_render_regression_has_legend():
    x = np.arange(10, dtype=float)
    text = render_regression(ols(x + np.sin(x), np.column_stack([np.ones(10), x])), "demo")
    assert text.splitlines()[0] == "demo"
    assert SIGNIF_LEGEND in text
    assert "Std. Error" in text


# ==============================================================================
# --- DIAGNOSTICS ---
# ==============================================================================

def test_rhat_examples():
    rng = np.random.default_rng(4)
    assert rhat(rng.normal(size=(2, 2000))) < 1.05
    separated = np.vstack([rng.normal(0, 1, 500), rng.normal(100, 1, 500)])
    assert rhat(separated) > 3

    periodic = np.tile([0.0, 1.0, 2.0, 3.0], 24)
    assert rhat(np.vstack([periodic] * 4)) <= 1 + 1e-6
    with pytest.raises(AnalysisError):
        rhat(np.zeros((2, 10)))


def test_ess_examples():
    rng = np.random.default_rng(5)
    assert 700 <= ess(rng.normal(size=1000)) <= 1300

    ar = np.empty(1000)
    ar[0] = rng.normal()
    for t in range(1, 1000):
        ar[t] = 0.9 * ar[t - 1] + rng.normal()
    assert ess(ar) < 200
    antithetic = np.tile([1.0, -1.0], 500) + 0.01 * rng.normal(size=1000)
    assert ess(antithetic) <= 1000
    with pytest.raises(AnalysisError):
        ess(np.ones(50))


def _ar_chains(length, start, rng, rho=0.9):
    chains = np.empty((2, length))
    state = np.array([start, -start])
    for t in range(length):
        state = rho * state + rng.normal(size=2)
        chains[:, t] = state
    return chains


def test_rhat_shrinks_as_chains_lengthen():
    rng = np.random.default_rng(8)
    means = [np.mean([rhat(_ar_chains(length, 20.0, rng)) for _ in range(10)]) for length in (40, 400, 4000)]
    assert means[0] > means[1] > means[2]
    assert means[2] < 1.02


def test_node_diagnostics_warns_on_high_rhat(caplog):
    rng = np.random.default_rng(6)
    draws = rng.normal(size=(2, 100, 3))
    draws[1, :, 2] += 50
    with caplog.at_level(logging.WARNING):
        frame = node_diagnostics(draws)
    assert list(frame.columns) == ["node_id", "rhat", "ess"]
    assert frame.loc[2, "rhat"] > 1.1
    assert "R-hat above" in caplog.text

    single = node_diagnostics(draws[:1])
    assert single["rhat"].isna().all()


# ==============================================================================
# --- ACCURACY SUMMARIES AND RUN ANALYSIS ---
# ==============================================================================

def test_accuracy_summaries():
    records = _records(noise=0.0) + _records(noise=0.0, category="cognition")
    distribution = accuracy_distribution(records, by="category")
    assert set(distribution["category"]) == {"mood", "cognition"}
    assert distribution["mean"].tolist() == pytest.approx([0.3, 0.3])
    matrix = accuracy_matrix(records)
    assert matrix.shape == (2, 7)
    with pytest.raises(AnalysisError):
        accuracy_distribution(records, by="indicator")

    strength = covariance_strength({("Rest1", "mood"): _summary([0.1, -0.3])})
    assert strength.loc[0, "mean_abs_cov"] == pytest.approx(0.2)


def _trace(V, chains=2, n=40, seed=0):
    rng = np.random.default_rng(seed)
    draws = [PosteriorDraws(chain_id=c, iterations=np.arange(1, n + 1), cov=rng.normal(size=(n, V)),
                            log_joint=np.zeros(n), e=np.zeros((n, 1)), sigma2_c=np.ones(n),
                            kappa=np.zeros((n, 0))) for c in range(chains)]
    return trace_frame(draws)


def test_analyze_run_outputs():
    V = 20
    rng = np.random.default_rng(7)
    summaries = {(condition, "mood"): _summary(rng.normal(size=V)) for condition in CANONICAL_CONDITIONS}
    traces = {("Rest1", "mood", 0): _trace(V)}
    outputs = analyze_run(summaries, _records(shift=-0.1), traces, synthetic_atlas(V), k=3)

    for name in ("biomarkers.csv", "spider.csv", "condition_counts.csv", "covariance_strength.csv",
                 "rest_task.csv", "regressions.json", "regressions.txt", "accuracy_distribution.csv",
                 "accuracy_matrix.csv", "diagnostics.csv"):
        assert name in outputs
    assert len(outputs["biomarkers.csv"]) == 7 * 6
    effect = outputs["regressions.json"]["condition_effect/mood"]
    assert len(effect["coefficients"]) == 7
    assert len(outputs["diagnostics.csv"]) == V
    assert set(outputs["rest_task.csv"]["group"]) == {"rest", "task"}


def test_analyze_run_with_one_condition_skips_condition_regression(caplog):
    summaries = {("Rest1", "mood"): _summary(np.linspace(-1, 1, 10))}
    records = [rec for rec in _records() if rec.condition == "Rest1"]
    with caplog.at_level(logging.WARNING):
        outputs = analyze_run(summaries, records, {}, synthetic_atlas(10), k=2)
    assert "condition_effect/mood" not in outputs["regressions.json"]
    assert len(outputs["biomarkers.csv"]) == 4
    assert "Skipped condition_effect/mood" in caplog.text


def test_fit_only_run_warns_that_condition_regression_is_skipped(caplog):
    summaries = {("Rest1", "mood"): _summary(np.linspace(-1, 1, 10))}
    with caplog.at_level(logging.WARNING):
        outputs = analyze_run(summaries, [], {}, synthetic_atlas(10), k=2)
    assert not any(label.startswith("condition_effect") for label in outputs["regressions.json"])
    assert "no accuracy records" in caplog.text
