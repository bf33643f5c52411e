"""
Analysis of fitted models and prediction accuracies
Biomarker ranking, network counts, OLS regressions, convergence diagnostics and accuracy summaries
"""

import logging
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import arviz as az
import numpy as np
import pandas as pd
import statsmodels.api as sm
from scipy import stats

from .errors import AnalysisError
from .models import (
    CANONICAL_NETWORKS,
    CONDITION_DUMMIES,
    REFERENCE_CONDITION,
    REFERENCE_NETWORK,
    REST_CONDITIONS,
    TASK_CONDITIONS,
    AccuracyRecord,
    Atlas,
    BiomarkerSet,
    ConditionEffectModel,
    Dataset,
    PosteriorSummary,
    RegressionResult,
    RegressionTerm,
)
from .sampler import chains_by_node

logger = logging.getLogger(__name__)

RHAT_WARNING = 1.1
SIGNIF_LEGEND = "Signif. codes: 0 '***' 0.001 '**' 0.01 '*' 0.05 '.' 0.1 ' ' 1"
SIGNIF_LEVELS = ((0.001, "***"), (0.01, "**"), (0.05, "*"), (0.1, "."))


# ==============================================================================
# --- BIOMARKERS ---
# ==============================================================================

def top_biomarkers(summary: PosteriorSummary, k: int = 10, condition: str = "",
                   category: str = "") -> BiomarkerSet:
    """
    The k most positive and k most negative node covariances

    Ties are broken by ascending node_id; negative nodes are drawn from the
    nodes not already chosen as positive.
    """
    V = len(summary.node_ids)
    if k < 0 or V < 2 * k:
        raise AnalysisError(f"Need V >= 2k for k={k}, got V={V}")
    values = {int(node): float(cov) for node, cov in zip(summary.node_ids, summary.cov_mean)}
    positive = sorted(values, key=lambda node: (-values[node], node))[:k]
    chosen = set(positive)
    negative = [node for node in sorted(values, key=lambda node: (values[node], node))
                if node not in chosen][:k]
    return BiomarkerSet(condition=condition, category=category, positive=positive,
                        negative=negative, values=values)


def network_counts(biomarkers: BiomarkerSet, atlas: Atlas) -> Dict[str, int]:
    """Canonical network -> number of biomarker nodes, zero-filled"""
    counts = {network: 0 for network in CANONICAL_NETWORKS}
    for node in list(biomarkers.positive) + list(biomarkers.negative):
        counts[atlas.network_of(node)] += 1
    return counts


def rest_task_average(counts_by_condition: Mapping[str, Mapping[str, float]]) -> Dict[str, Dict[str, float]]:
    """Mean counts over the two resting conditions and over the four task conditions"""
    missing = [c for c in REST_CONDITIONS + TASK_CONDITIONS if c not in counts_by_condition]
    if missing:
        raise AnalysisError(f"Network counts missing for conditions: {', '.join(missing)}")

    def mean_of(conditions):
        return {network: float(np.mean([counts_by_condition[c].get(network, 0) for c in conditions]))
                for network in CANONICAL_NETWORKS}

    return {"rest": mean_of(REST_CONDITIONS), "task": mean_of(TASK_CONDITIONS)}


def category_condition_counts(counts: Mapping[Tuple[str, str], Mapping[str, float]]) -> pd.DataFrame:
    """
    Mean network counts over categories per condition, Rest1 and Rest2 merged into "Rest"

    Returns:
        Frame with a condition column then one column per canonical network
    """
    grouped: Dict[str, List[Mapping[str, float]]] = {}
    for (condition, _), table in sorted(counts.items()):
        label = "Rest" if condition in REST_CONDITIONS else condition
        grouped.setdefault(label, []).append(table)
    rows = []
    for label, tables in grouped.items():
        row = {"condition": label}
        row.update({network: float(np.mean([t.get(network, 0) for t in tables])) for network in CANONICAL_NETWORKS})
        rows.append(row)
    return pd.DataFrame(rows, columns=["condition"] + list(CANONICAL_NETWORKS))


def biomarker_frame(biomarkers: Sequence[BiomarkerSet], atlas: Atlas) -> pd.DataFrame:
    """Long table condition,category,rank,sign,node_id,network,cov_mean"""
    rows = []
    for biomarker in biomarkers:
        for sign, nodes in (("positive", biomarker.positive), ("negative", biomarker.negative)):
            for rank, node in enumerate(nodes, start=1):
                rows.append([biomarker.condition, biomarker.category, rank, sign, node,
                             atlas.network_of(node), biomarker.values[node]])
    return pd.DataFrame(rows, columns=["condition", "category", "rank", "sign", "node_id", "network", "cov_mean"])


def spider_frame(counts: Mapping[Tuple[str, str], Mapping[str, int]]) -> pd.DataFrame:
    """Long table condition,category,network,count"""
    rows = [[condition, category, network, table[network]]
            for (condition, category), table in sorted(counts.items())
            for network in CANONICAL_NETWORKS]
    return pd.DataFrame(rows, columns=["condition", "category", "network", "count"])


def biomarker_edges(dataset: Dataset, biomarkers: BiomarkerSet,
                    subject_ids: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """Mean Fisher-z connectivity among the positive nodes and among the negative nodes"""
    condition = biomarkers.condition
    subjects = list(subject_ids) if subject_ids is not None else dataset.subjects_for(condition)
    mean = dataset.stack(condition, subjects).mean(axis=0)
    rows = []
    for sign, nodes in (("positive", biomarkers.positive), ("negative", biomarkers.negative)):
        ordered = sorted(nodes)
        for i, a in enumerate(ordered):
            for b in ordered[i + 1:]:
                rows.append([condition, biomarkers.category, sign, a, b, float(mean[a - 1, b - 1])])
    return pd.DataFrame(rows, columns=["condition", "category", "sign", "node_a", "node_b", "mean_z"])


# ==============================================================================
# --- REGRESSIONS ---
# ==============================================================================

def sig_code(p: float) -> str:
    """Significance code with strict less-than thresholds"""
    if p is None or np.isnan(p):
        return " "
    for threshold, code in SIGNIF_LEVELS:
        if p < threshold:
            return code
    return " "


def _collinear_columns(design: np.ndarray, names: Sequence[str]) -> List[str]:
    kept: List[int] = []
    collinear = []
    for j in range(design.shape[1]):
        if np.linalg.matrix_rank(design[:, kept + [j]]) > len(kept):
            kept.append(j)
        else:
            collinear.append(names[j])
    return collinear


def ols(y: Sequence[float], design: Union[np.ndarray, pd.DataFrame],
        names: Optional[Sequence[str]] = None) -> RegressionResult:
    """
    Ordinary least squares with the usual summary table

    Args:
        y: Response (n,)
        design: (n, q) design including the intercept column
        names: Column names (taken from a DataFrame design when omitted)

    Returns:
        RegressionResult; R^2 is 0 when y has no variation

    Raises:
        AnalysisError: n <= q or a rank-deficient design (collinear columns named)
    """
    if isinstance(design, pd.DataFrame):
        names = list(design.columns) if names is None else list(names)
        design = design.to_numpy(dtype=float)
    X = np.asarray(design, dtype=float)
    y = np.asarray(y, dtype=float)
    n, q = X.shape
    names = list(names) if names is not None else ["(Intercept)"] + [f"x{j}" for j in range(1, q)]
    if len(names) != q:
        raise AnalysisError(f"{len(names)} names for {q} design columns")
    if n <= q:
        raise AnalysisError(f"OLS needs more observations than columns (n={n}, q={q})")
    if np.linalg.matrix_rank(X) < q:
        raise AnalysisError(f"Design is rank deficient; collinear columns: {', '.join(_collinear_columns(X, names))}")

    fit = sm.OLS(y, X).fit()
    estimates = np.asarray(fit.params, dtype=float)
    errors = np.sqrt(np.maximum(np.diag(np.asarray(fit.cov_params())), 0.0))
    df = int(round(fit.df_resid))
    with np.errstate(divide="ignore", invalid="ignore"):
        t_values = np.where(errors > 0, estimates / np.where(errors > 0, errors, 1.0),
                            np.where(np.abs(estimates) > 1e-12, np.sign(estimates) * np.inf, np.nan))
    p_values = 2.0 * stats.t.sf(np.abs(t_values), df)

    total = float(((y - y.mean()) ** 2).sum())
    r_squared = 0.0 if total <= 1e-24 else float(np.clip(1.0 - fit.ssr / total, 0.0, 1.0))
    f_pvalue = float(fit.f_pvalue) if q > 1 and total > 1e-24 and np.isfinite(fit.f_pvalue) else float("nan")

    coefficients = {
        name: RegressionTerm(estimate=float(estimates[j]), std_error=float(errors[j]),
                             t_value=float(t_values[j]), p_value=float(p_values[j]),
                             sig_code=sig_code(float(p_values[j])))
        for j, name in enumerate(names)
    }
    return RegressionResult(coefficients=coefficients, r_squared=r_squared, n=n, residual_df=df,
                            f_pvalue=f_pvalue)


def condition_effect_regression(records: Sequence[AccuracyRecord], category: str,
                                method: str = "latentsna", average_repeats: bool = True) -> ConditionEffectModel:
    """
    Accuracy on six condition dummies with Rest1 as reference, for one category

    Args:
        records: Accuracy records (other categories and methods are ignored)
        category: Behavior category
        method: Prediction method whose accuracies are regressed
        average_repeats: Average repeats per (condition, indicator) before fitting

    Returns:
        ConditionEffectModel
    """
    frame = pd.DataFrame([
        {"condition": rec.condition, "indicator": rec.indicator, "repeat": rec.repeat_index, "r": rec.r}
        for rec in records if rec.category == category and rec.method == method
    ], columns=["condition", "indicator", "repeat", "r"]).dropna(subset=["r"])
    levels = (REFERENCE_CONDITION,) + CONDITION_DUMMIES
    missing = [c for c in levels if c not in set(frame["condition"])]
    if missing:
        raise AnalysisError(f"Accuracy records of '{category}' lack conditions: {', '.join(missing)}")
    frame = frame[frame["condition"].isin(levels)]
    if average_repeats:
        frame = frame.groupby(["condition", "indicator"], sort=True, as_index=False)["r"].mean()

    design = pd.DataFrame({"(Intercept)": np.ones(len(frame))})
    for dummy in CONDITION_DUMMIES:
        design[dummy] = (frame["condition"].to_numpy() == dummy).astype(float)
    result = ols(frame["r"].to_numpy(dtype=float), design)
    return ConditionEffectModel(category=category, reference_condition=REFERENCE_CONDITION,
                                dummies=list(CONDITION_DUMMIES), result=result)


def label_effect_regression(estimates: Union[PosteriorSummary, Mapping[int, float], Sequence[float]],
                            atlas: Atlas, use_absolute: bool = False) -> RegressionResult:
    """
    Node covariance estimates on network dummies, Default Mode as reference

    Networks with no node in the atlas get no dummy.
    """
    if isinstance(estimates, PosteriorSummary):
        values = dict(zip(estimates.node_ids, estimates.cov_mean))
    elif isinstance(estimates, Mapping):
        values = dict(estimates)
    else:
        values = dict(enumerate(estimates, start=1))
    missing = [node for node in atlas.node_ids if node not in values or not np.isfinite(values[node])]
    if missing:
        raise AnalysisError(f"No covariance estimate for nodes {missing[:10]}")

    y = np.array([values[node] for node in atlas.node_ids], dtype=float)
    if use_absolute:
        y = np.abs(y)
    node_ids = np.array(atlas.node_ids)
    design = pd.DataFrame({"(Intercept)": np.ones(atlas.V)})
    absent = []
    for network in CANONICAL_NETWORKS:
        if network == REFERENCE_NETWORK:
            continue
        members = atlas.nodes_in(network)
        if not members:
            absent.append(network)
            continue
        design[network] = np.isin(node_ids, members).astype(float)
    if absent:
        logger.warning(f"No nodes in networks {', '.join(absent)}; their dummies are dropped")
    if not atlas.nodes_in(REFERENCE_NETWORK):
        logger.warning(f"Reference network {REFERENCE_NETWORK} has no nodes; the intercept absorbs no level")
    return ols(y, design)


def render_regression(result: RegressionResult, title: str = "") -> str:
    """Plain-text coefficient table with significance codes and legend"""
    width = max([len(name) for name in result.coefficients] + [11])
    lines = [title] if title else []
    lines.append(f"{'':<{width}} {'Estimate':>10} {'Std. Error':>10} {'t value':>8} {'Pr(>|t|)':>10}")
    for name, term in result.coefficients.items():
        lines.append(
            f"{name:<{width}} {term.estimate:>10.4f} {term.std_error:>10.4f} "
            f"{term.t_value:>8.3f} {term.p_value:>10.3g} {term.sig_code}"
        )
    lines.append("---")
    lines.append(SIGNIF_LEGEND)
    lines.append(
        f"R-squared: {result.r_squared:.4f}, n = {result.n}, residual df = {result.residual_df}, "
        f"F-test p-value: {result.f_pvalue:.4g}"
    )
    return "\n".join(lines)


# ==============================================================================
# --- CONVERGENCE DIAGNOSTICS ---
# ==============================================================================

def _as_chains(chains) -> np.ndarray:
    array = np.asarray(chains, dtype=float)
    if array.ndim == 1:
        array = array[None, :]
    if array.ndim != 2:
        raise AnalysisError(f"Expected (chains, draws) array, got shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise AnalysisError("Draws contain non-finite values")
    return array


def _posterior(array: np.ndarray):
    return az.convert_to_dataset({"x": array})


def rhat(chains) -> float:
    """
    Split-R-hat of two or more equal-length chains

    Args:
        chains: (m, n) draws, m >= 2, n >= 4

    Returns:
        sqrt(var_plus / W) over the split chains
    """
    array = _as_chains(chains)
    m, n = array.shape
    if m < 2 or n < 4:
        raise AnalysisError(f"rhat needs >= 2 chains of length >= 4, got {m} x {n}")
    if np.ptp(array) == 0:
        raise AnalysisError("rhat is undefined for constant draws")
    return float(az.rhat(_posterior(array), method="split")["x"])


def ess(chains) -> float:
    """
    Effective sample size via Geyer's initial positive and monotone sequences

    Args:
        chains: One chain (n,) or several (m, n), n >= 10

    Returns:
        ESS, capped at the total number of draws
    """
    array = _as_chains(chains)
    m, n = array.shape
    if n < 10:
        raise AnalysisError(f"ess needs chains of length >= 10, got {n}")
    if np.ptp(array) == 0:
        raise AnalysisError("ess is undefined for a constant chain")
    value = float(az.ess(_posterior(array), method="mean")["x"])
    total = m * n
    return float(total) if not np.isfinite(value) or value <= 0 else min(value, float(total))


def node_diagnostics(draws: np.ndarray) -> pd.DataFrame:
    """
    Split-R-hat (across chains) and pooled ESS per node

    Args:
        draws: (chains, draws, nodes) covariance draws

    Returns:
        Frame node_id,rhat,ess; rhat is NaN with a single chain
    """
    chains, _, V = draws.shape
    rows = []
    for v in range(V):
        series = draws[:, :, v]
        try:
            node_rhat = rhat(series) if chains >= 2 else float("nan")
        except AnalysisError:
            node_rhat = float("nan")
        try:
            node_ess = ess(series)
        except AnalysisError:
            node_ess = float("nan")
        rows.append([v + 1, node_rhat, node_ess])
    frame = pd.DataFrame(rows, columns=["node_id", "rhat", "ess"])
    high = frame[frame["rhat"] > RHAT_WARNING]
    if not high.empty:
        logger.warning(f"{len(high)} of {V} nodes have split R-hat above {RHAT_WARNING} "
                       f"(max {high['rhat'].max():.3f} at node {int(high.loc[high['rhat'].idxmax(), 'node_id'])})")
    return frame


# ==============================================================================
# --- ACCURACY SUMMARIES ---
# ==============================================================================

def _records_frame(records: Sequence[AccuracyRecord]) -> pd.DataFrame:
    return pd.DataFrame(
        [[rec.method, rec.condition, rec.category, rec.indicator, rec.repeat_index, rec.r] for rec in records],
        columns=["method", "condition", "category", "indicator", "repeat", "r"],
    ).dropna(subset=["r"])


def accuracy_distribution(records: Sequence[AccuracyRecord], by: str = "condition") -> pd.DataFrame:
    """Mean, 25% and 75% quantiles of accuracy per (by, method)"""
    if by not in ("condition", "category"):
        raise AnalysisError(f"accuracy_distribution groups by condition or category, not '{by}'")
    frame = _records_frame(records)
    columns = [by, "method", "mean", "q25", "q75", "n"]
    if frame.empty:
        return pd.DataFrame(columns=columns)
    grouped = frame.groupby([by, "method"], sort=True)["r"]
    table = pd.DataFrame({
        "mean": grouped.mean(),
        "q25": grouped.quantile(0.25),
        "q75": grouped.quantile(0.75),
        "n": grouped.count(),
    }).reset_index()
    return table[columns]


def accuracy_matrix(records: Sequence[AccuracyRecord], method: str = "latentsna") -> pd.DataFrame:
    """Mean accuracy over repeats and indicators, categories x conditions"""
    frame = _records_frame(records)
    frame = frame[frame["method"] == method]
    if frame.empty:
        return pd.DataFrame()
    return frame.pivot_table(index="category", columns="condition", values="r", aggfunc="mean").sort_index()


def covariance_strength(summaries: Mapping[Tuple[str, str], PosteriorSummary]) -> pd.DataFrame:
    """Mean |cov_mean| over nodes per (category, condition)"""
    rows = [[category, condition, float(np.mean(np.abs(summary.cov_mean)))]
            for (condition, category), summary in sorted(summaries.items())]
    return pd.DataFrame(rows, columns=["category", "condition", "mean_abs_cov"])


# ==============================================================================
# --- RUN ANALYSIS ---
# ==============================================================================

def analyze_run(summaries: Mapping[Tuple[str, str], PosteriorSummary], records: Sequence[AccuracyRecord],
                traces: Mapping[Tuple[str, str, int], pd.DataFrame], atlas: Atlas,
                dataset: Optional[Dataset] = None, k: int = 10) -> Dict[str, object]:
    """
    Every analysis table of a prior fit or cv run

    Returns:
        Relative output path -> DataFrame, mapping or text
    """
    outputs: Dict[str, object] = {}
    biomarkers = [top_biomarkers(summary, k, condition, category)
                  for (condition, category), summary in sorted(summaries.items())]
    counts = {(b.condition, b.category): network_counts(b, atlas) for b in biomarkers}
    outputs["biomarkers.csv"] = biomarker_frame(biomarkers, atlas)
    outputs["spider.csv"] = spider_frame(counts)
    outputs["condition_counts.csv"] = category_condition_counts(counts)
    outputs["covariance_strength.csv"] = covariance_strength(summaries)

    rest_task_rows = []
    for category in sorted({category for _, category in counts}):
        by_condition = {condition: table for (condition, cat), table in counts.items() if cat == category}
        try:
            averaged = rest_task_average(by_condition)
        except AnalysisError as e:
            logger.info(f"Rest/task averages skipped for '{category}': {e}")
            continue
        for group, table in averaged.items():
            rest_task_rows.extend([category, group, network, count] for network, count in table.items())
    outputs["rest_task.csv"] = pd.DataFrame(rest_task_rows, columns=["category", "group", "network", "count"])

    regressions: Dict[str, Dict] = {}
    texts = []
    for (condition, category), summary in sorted(summaries.items()):
        for use_absolute in (False, True):
            label = f"label_effect/{condition}/{category}/{'absolute' if use_absolute else 'signed'}"
            try:
                result = label_effect_regression(summary, atlas, use_absolute=use_absolute)
            except AnalysisError as e:
                logger.warning(f"Skipped {label}: {e}")
                continue
            regressions[label] = result.to_dict()
            texts.append(render_regression(result, label))

    if records:
        for category in sorted({rec.category for rec in records}):
            label = f"condition_effect/{category}"
            try:
                model = condition_effect_regression(records, category)
            except AnalysisError as e:
                logger.warning(f"Skipped {label}: {e}")
                continue
            regressions[label] = {"reference_condition": model.reference_condition,
                                  "dummies": model.dummies, **model.result.to_dict()}
            texts.append(render_regression(model.result, label))
        distribution = pd.concat([
            accuracy_distribution(records, by).rename(columns={by: "level"}).assign(by=by)
            for by in ("condition", "category")
        ], ignore_index=True)
        outputs["accuracy_distribution.csv"] = distribution[["by", "level", "method", "mean", "q25", "q75", "n"]]
        outputs["accuracy_matrix.csv"] = accuracy_matrix(records).reset_index()
    else:
        logger.warning("Skipped condition_effect regressions: the run has no accuracy records (fit-only run)")
    outputs["regressions.json"] = regressions
    outputs["regressions.txt"] = "\n\n".join(texts)

    diagnostics = []
    for (condition, category, repeat), trace in sorted(traces.items()):
        if trace.empty:
            continue
        frame = node_diagnostics(chains_by_node(trace))
        frame.insert(0, "repeat", repeat)
        frame.insert(0, "category", category)
        frame.insert(0, "condition", condition)
        diagnostics.append(frame)
    if diagnostics:
        outputs["diagnostics.csv"] = pd.concat(diagnostics, ignore_index=True)

    if dataset is not None:
        edges = [biomarker_edges(dataset, b) for b in biomarkers if b.condition in dataset.conditions]
        if edges:
            outputs["biomarker_edges.csv"] = pd.concat(edges, ignore_index=True)
    return outputs
