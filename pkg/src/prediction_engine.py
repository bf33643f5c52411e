"""
Prediction Engine
Cross-validated semi-supervised behavior prediction, accuracy scoring and run orchestration
"""

import hashlib
import json
import logging
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy import stats

from .baselines import cpm_fit_predict, ridge_fit_predict
from .data_manager import edge_matrix, run_subjects
from .errors import AnalysisError, ConfigError
from .models import (
    MIN_TEST,
    AccuracyRecord,
    CVConfig,
    Dataset,
    FitResult,
    PosteriorDraws,
    RunConfig,
    RunResults,
    SamplerConfig,
    SplitPlan,
)
from .rng import STREAM_INNER_CV, STREAM_SPLIT, derive_seed, make_rng
from .sampler import average_summaries, fit_model, model_data, posterior_summary, trace_frame

logger = logging.getLogger(__name__)

PREDICTION_COLUMNS = [
    "method", "condition", "category", "indicator", "repeat", "subject_id",
    "predicted", "observed", "construct", "split_hash",
]
MIN_SUBJECTS = 10

Split = Tuple[List[str], List[str]]


# ==============================================================================
# --- SPLITS ---
# ==============================================================================

def split_folds(subjects: Union[int, Sequence[str]], train_fraction: float = 0.9, repeats: int = 5,
                seed: int = 0, partitioned: bool = False) -> SplitPlan:
    """
    Seeded train/test splits

    Each repeat draws round(train_fraction * n) training subjects uniformly
    without replacement. With ``partitioned`` the subjects are instead dealt
    into K = round(1 / (1 - train_fraction)) disjoint test folds (one split per
    fold, ``repeats`` is not used).

    Args:
        subjects: Subject ids, or a count n (ids "0".."n-1")
        train_fraction: Fraction of subjects used for training, in (0.5, 0.95)
        repeats: Number of random splits
        seed: Run seed
        partitioned: Deal true K-fold partitions

    Returns:
        SplitPlan with sorted id lists
    """
    ids = [str(i) for i in range(subjects)] if isinstance(subjects, int) else list(subjects)
    n = len(ids)
    if not 0.5 < train_fraction < 0.95:
        raise ConfigError(f"train_fraction must lie in (0.5, 0.95), got {train_fraction}")
    if n < MIN_SUBJECTS:
        raise ConfigError(f"At least {MIN_SUBJECTS} subjects are needed for splitting, got {n}")
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")

    rng = make_rng(seed, STREAM_SPLIT)
    splits: List[Split] = []
    if partitioned:
        k = int(round(1.0 / (1.0 - train_fraction)))
        order = rng.permutation(n)
        for fold in np.array_split(order, k):
            held = set(fold.tolist())
            splits.append(_as_split(ids, held))
    else:
        n_test = n - int(round(train_fraction * n))
        for _ in range(repeats):
            held = set(rng.permutation(n)[:n_test].tolist())
            splits.append(_as_split(ids, held))

    for train, test in splits:
        assert not set(train) & set(test) and len(train) + len(test) == n
    return SplitPlan(repeats=splits, train_fraction=train_fraction, seed=seed, partitioned=partitioned)


def _as_split(ids: List[str], held: set) -> Split:
    train = sorted(ids[i] for i in range(len(ids)) if i not in held)
    test = sorted(ids[i] for i in held)
    return train, test


def split_hash(plan: SplitPlan) -> str:
    """sha256 over the sorted train/test ids of every repeat"""
    payload = [[sorted(train), sorted(test)] for train, test in plan.repeats]
    return hashlib.sha256(json.dumps(payload, separators=(",", ":")).encode("utf-8")).hexdigest()


# ==============================================================================
# --- SCORING ---
# ==============================================================================

def pearson(a: Sequence[float], b: Sequence[float]) -> float:
    """Sample Pearson correlation; raises AnalysisError when undefined"""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise AnalysisError(f"pearson needs two 1-D sequences of equal length, got {a.shape} and {b.shape}")
    if a.shape[0] < MIN_TEST:
        raise AnalysisError(f"pearson needs at least {MIN_TEST} pairs, got {a.shape[0]}")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise AnalysisError("Correlation is undefined for a constant input")
    return float(np.clip(stats.pearsonr(a, b)[0], -1.0, 1.0))


def accuracy_table(predictions: pd.DataFrame,
                   expected: Optional[Iterable[Tuple]] = None) -> Tuple[List[AccuracyRecord], pd.DataFrame]:
    """
    Per-cell accuracy records and the mean-over-repeats view

    A cell is (method, condition, category, indicator, repeat). Rows with a
    missing observed value are dropped; a cell whose correlation is undefined
    (constant predictions, fewer than three pairs) gets r = NaN and a warning.

    Args:
        predictions: Prediction table
        expected: Cells that must be present; missing ones raise AnalysisError

    Returns:
        (records, mean table with columns method,condition,category,indicator,r,n_repeats)
    """
    keys = ["method", "condition", "category", "indicator", "repeat"]
    if expected is not None:
        present = set()
        if not predictions.empty:
            present = set(predictions[keys].drop_duplicates().itertuples(index=False, name=None))
        missing = sorted(set(expected) - present)
        if missing:
            listed = "; ".join(str(cell) for cell in missing[:10])
            raise AnalysisError(f"{len(missing)} prediction cells missing: {listed}")

    records = []
    if not predictions.empty:
        for (method, condition, category, indicator, repeat), cell in predictions.groupby(keys, sort=True):
            cell = cell.dropna(subset=["observed", "predicted"])
            try:
                r = pearson(cell["predicted"], cell["observed"])
            except AnalysisError as e:
                logger.warning(f"Accuracy undefined for {method}/{condition}/{category}/{indicator} "
                               f"repeat {repeat}: {e}")
                r = float("nan")
            records.append(AccuracyRecord(condition=condition, category=category, indicator=indicator,
                                          repeat_index=int(repeat), r=r, n_test=len(cell), method=method))
    return records, accuracy_mean(records)


def accuracy_frame(records: Sequence[AccuracyRecord]) -> pd.DataFrame:
    columns = ["method", "condition", "category", "indicator", "repeat", "r", "n_test"]
    rows = [[rec.method, rec.condition, rec.category, rec.indicator, rec.repeat_index, rec.r, rec.n_test]
            for rec in records]
    return pd.DataFrame(rows, columns=columns)


def accuracy_mean(records: Sequence[AccuracyRecord]) -> pd.DataFrame:
    """Mean r over repeats per (method, condition, category, indicator)"""
    frame = accuracy_frame(records)
    columns = ["method", "condition", "category", "indicator", "r", "n_repeats"]
    if frame.empty:
        return pd.DataFrame(columns=columns)
    grouped = frame.groupby(["method", "condition", "category", "indicator"], sort=True)["r"]
    mean = grouped.mean().rename("r").to_frame()
    mean["n_repeats"] = grouped.count()
    return mean.reset_index()[columns]


# ==============================================================================
# --- PER-SPLIT FITS ---
# ==============================================================================

def _prediction_rows(method: str, condition: str, category: str, repeat: int, subjects: Sequence[str],
                     indicators: Sequence[str], predicted: np.ndarray, observed: np.ndarray,
                     construct: Optional[np.ndarray], plan_hash: str) -> pd.DataFrame:
    n, P = predicted.shape
    return pd.DataFrame({
        "method": method,
        "condition": condition,
        "category": category,
        "indicator": np.tile(list(indicators), n),
        "repeat": repeat,
        "subject_id": np.repeat(list(subjects), P),
        "predicted": predicted.ravel(),
        "observed": observed.ravel(),
        "construct": np.repeat(np.full(n, np.nan) if construct is None else construct, P),
        "split_hash": plan_hash,
    })[PREDICTION_COLUMNS]


def latent_predictions(draws: Sequence[PosteriorDraws], fit_panel, subjects: Sequence[str]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Posterior-mean predictions for designated subjects

    Returns:
        (predictions in raw indicator units (n, P), posterior mean construct (n,))
    """
    rows = [draws[0].designated_ids.index(subject) for subject in subjects]
    kappa = np.vstack([draw.kappa[:, rows] for draw in draws])
    e = np.vstack([draw.e for draw in draws])
    standardized = (e[:, None, :] + kappa[:, :, None]).mean(axis=0)
    return fit_panel.destandardize(standardized), kappa.mean(axis=0)


def fit_predict(dataset: Dataset, condition: str, category: str, split: Split, sampler_config: SamplerConfig,
                select_by: str = "train-fit", repeat: int = 0, n_jobs: int = 1,
                plan_hash: str = "") -> Tuple[pd.DataFrame, FitResult]:
    """
    Fit the joint model with test behaviors masked and predict them

    All connectomes enter the fit; only training behaviors do. Predictions are
    posterior means of e_p + kappa_j mapped back through the training scaling.

    Args:
        dataset: Loaded dataset
        condition: fMRI condition
        category: Behavior category
        split: (train ids, test ids)
        sampler_config: MCMC settings
        select_by: Restart selection, "train-fit" or "test-fit"
        repeat: Repeat index (selects RNG streams)
        n_jobs: Workers for restarts and chains
        plan_hash: Split hash written into the table

    Returns:
        (prediction table, fit result)
    """
    train, test = split
    subjects = run_subjects(dataset, condition, category)
    unknown = sorted((set(train) | set(test)) - set(subjects))
    if unknown:
        raise ConfigError(f"Split references subjects outside {category}/{condition}: {unknown[:5]}")
    data = model_data(dataset, condition, category, masked=test)
    raw = dataset.panel(category)
    observed = raw.rows(list(test))

    scorer = None
    if select_by == "test-fit":
        # Replicates selection on held-out fit; reads the masked values
        def scorer(draws):
            predicted, _ = latent_predictions(draws, data.panel, test)
            scores = []
            for p in range(raw.P):
                keep = ~np.isnan(observed[:, p])
                try:
                    scores.append(pearson(predicted[keep, p], observed[keep, p]))
                except AnalysisError:
                    continue
            return float(np.mean(scores)) if scores else -np.inf

    fit = fit_model(data, sampler_config, select_by=select_by, scorer=scorer, repeat=repeat,
                    n_jobs=n_jobs, designated=test)
    predicted, construct = latent_predictions(fit.draws, data.panel, test)
    frame = _prediction_rows("latentsna", condition, category, repeat, test, raw.indicators,
                             predicted, observed, construct, plan_hash)
    return frame, fit


def baseline_predict(dataset: Dataset, condition: str, category: str, split: Split, method: str,
                     cv_config: CVConfig, seed: int = 0, repeat: int = 0,
                     plan_hash: str = "") -> Tuple[pd.DataFrame, List[Dict]]:
    """
    CPM or ridge predictions of every indicator for the test subjects

    Each indicator is fitted on the training subjects where it is observed.

    Returns:
        (prediction table, per-indicator detail records)
    """
    train, test = split
    raw = dataset.panel(category)
    train_edges = edge_matrix(dataset, condition, train)
    test_edges = edge_matrix(dataset, condition, test)
    train_values = raw.rows(list(train))
    predicted = np.empty((len(test), raw.P))
    details = []
    for p, indicator in enumerate(raw.indicators):
        keep = ~np.isnan(train_values[:, p])
        if method == "cpm":
            result = cpm_fit_predict(train_edges[keep], train_values[keep, p], test_edges,
                                     p_threshold=cv_config.cpm_threshold)
        elif method == "ridge":
            result = ridge_fit_predict(train_edges[keep], train_values[keep, p], test_edges,
                                       cv_config.ridge_lambdas, inner_folds=cv_config.inner_folds,
                                       seed=derive_seed(seed, STREAM_INNER_CV, repeat, p))
        else:
            raise ConfigError(f"Unknown baseline method '{method}'")
        predicted[:, p] = result.predictions
        details.append({"method": method, "condition": condition, "category": category,
                        "indicator": indicator, "repeat": repeat, "flagged": result.flagged,
                        **result.detail})
    frame = _prediction_rows(method, condition, category, repeat, test, raw.indicators,
                             predicted, raw.rows(list(test)), None, plan_hash)
    return frame, details


# ==============================================================================
# --- ORCHESTRATION ---
# ==============================================================================

def _run_cell(dataset: Dataset, condition: str, category: str, method: str, repeat: int, split: Split,
              sampler_config: SamplerConfig, cv_config: CVConfig, plan_hash: str) -> Dict:
    if method == "latentsna":
        frame, fit = fit_predict(dataset, condition, category, split, sampler_config,
                                 select_by=cv_config.select_by, repeat=repeat, plan_hash=plan_hash)
        return {
            "predictions": frame,
            "summary": posterior_summary(fit.draws),
            "trace": trace_frame(fit.draws),
            "restart": {"condition": condition, "category": category, "repeat": repeat,
                        "restart": fit.restart, "scores": fit.restart_scores, "select_by": fit.select_by},
        }
    frame, details = baseline_predict(dataset, condition, category, split, method, cv_config,
                                      seed=sampler_config.seed, repeat=repeat, plan_hash=plan_hash)
    return {"predictions": frame, "details": details}


class PredictionEngine:
    """Runs full-sample fits and cross-validated prediction over (condition, category) cells"""

    def __init__(self, config: RunConfig, dataset: Dataset):
        self.config = config
        self.dataset = dataset
        self.plans: Dict[str, SplitPlan] = {}

    def resolve_cells(self) -> List[Tuple[str, str]]:
        """(condition, category) pairs selected by the configuration filters"""
        conditions = self.config.conditions or list(self.dataset.conditions)
        categories = self.config.categories or sorted(self.dataset.behaviors)
        for condition in conditions:
            if condition not in self.dataset.conditions:
                raise ConfigError(f"Condition {condition} is not in the dataset")
        for category in categories:
            if category not in self.dataset.behaviors:
                raise ConfigError(f"Category {category} is not in the dataset")
        return [(condition, category) for condition in conditions for category in categories]

    def plan_for(self, category: str) -> SplitPlan:
        """One split plan per category, shared by every condition and method"""
        if category not in self.plans:
            cv = self.config.cv
            subjects = sorted(self.dataset.panel(category).subject_ids)
            self.plans[category] = split_folds(subjects, cv.train_fraction, cv.repeats,
                                               self.config.sampler.seed, cv.partitioned)
        return self.plans[category]

    def run_cv(self) -> RunResults:
        """
        Cross-validated prediction for every cell, repeat and method

        Returns:
            RunResults with predictions, accuracy records, repeat-averaged
            posterior summaries and per-repeat traces
        """
        cells = self.resolve_cells()
        cv = self.config.cv
        results = RunResults()
        tasks = []
        for condition, category in cells:
            plan = self.plan_for(category)
            plan_hash = split_hash(plan)
            results.split_hashes[category] = plan_hash
            for method in cv.methods:
                for repeat, split in enumerate(plan.repeats):
                    tasks.append((condition, category, method, repeat, split, plan_hash))

        logger.info(f"Running {len(tasks)} prediction tasks over {len(cells)} cells "
                    f"with {self.config.threads} workers")
        outputs = Parallel(n_jobs=self.config.threads)(
            delayed(_run_cell)(self.dataset, condition, category, method, repeat, split,
                               self.config.sampler, cv, plan_hash)
            for condition, category, method, repeat, split, plan_hash in tasks
        )

        frames = []
        per_cell_summaries: Dict[Tuple[str, str], List] = {}
        for (condition, category, method, repeat, _, _), output in zip(tasks, outputs):
            frames.append(output["predictions"])
            if method == "latentsna":
                per_cell_summaries.setdefault((condition, category), []).append(output["summary"])
                results.traces[(condition, category, repeat)] = output["trace"]
                results.restarts.append(output["restart"])
            else:
                flagged = [d for d in output["details"] if d["flagged"]]
                if flagged:
                    logger.warning(f"{method} fell back to the training mean for {len(flagged)} indicators "
                                   f"in {condition}/{category} repeat {repeat}")
        results.predictions = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=PREDICTION_COLUMNS)
        results.summaries = {cell: average_summaries(s) for cell, s in per_cell_summaries.items()}

        expected = [
            (method, condition, category, indicator, repeat)
            for condition, category in cells
            for method in cv.methods
            for indicator in self.dataset.panel(category).indicators
            for repeat in range(len(self.plan_for(category).repeats))
        ]
        results.records, _ = accuracy_table(results.predictions, expected)
        logger.info(f"Cross-validation finished: {len(results.records)} accuracy records")
        return results

    def run_fit(self) -> RunResults:
        """Full-sample fit of every cell (no held-out behaviors)"""
        results = RunResults()
        for condition, category in self.resolve_cells():
            data = model_data(self.dataset, condition, category)
            fit = fit_model(data, self.config.sampler, select_by="train-fit",
                            n_jobs=self.config.threads, designated=[])
            results.summaries[(condition, category)] = posterior_summary(fit.draws)
            results.traces[(condition, category, 0)] = trace_frame(fit.draws)
            results.restarts.append({"condition": condition, "category": category, "repeat": 0,
                                     "restart": fit.restart, "scores": fit.restart_scores,
                                     "select_by": fit.select_by})
            logger.info(f"Fitted {condition}/{category}: restart {fit.restart}, "
                        f"{sum(d.n_draws for d in fit.draws)} retained draws")
        return results
