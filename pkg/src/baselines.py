"""
Baseline predictors on vectorized connectome edges
Connectome-based predictive modeling (two-sum CPM) and ridge regression with inner-CV penalty selection
"""

import logging
from typing import Sequence, Tuple

import numpy as np
from scipy import linalg, stats
from sklearn.model_selection import KFold
from sklearn.preprocessing import StandardScaler

from .errors import AnalysisError
from .models import BaselineResult

logger = logging.getLogger(__name__)

MIN_TRAINING_SUBJECTS = 10


def _check_training(edges: np.ndarray, y: np.ndarray):
    if edges.shape[0] != y.shape[0]:
        raise AnalysisError(f"{edges.shape[0]} edge rows but {y.shape[0]} targets")
    if y.shape[0] < MIN_TRAINING_SUBJECTS:
        raise AnalysisError(f"At least {MIN_TRAINING_SUBJECTS} training subjects required, got {y.shape[0]}")


# ==============================================================================
# --- CPM ---
# ==============================================================================

def edge_p_values(edges: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Pearson r of every edge with y and its two-sided t-test p-value

    Constant edges get r = 0 and p = 1.

    Args:
        edges: (n, E) edge matrix
        y: (n,) target

    Returns:
        (r, p), each of length E
    """
    edges = np.asarray(edges, dtype=float)
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    yc = y - y.mean()
    y_norm = np.sqrt(yc @ yc)
    if y_norm == 0:
        raise AnalysisError("Target is constant; edge correlations are undefined")
    xc = edges - edges.mean(axis=0)
    x_norm = np.sqrt((xc ** 2).sum(axis=0))
    r = np.divide(xc.T @ yc, x_norm * y_norm, out=np.zeros(edges.shape[1]), where=x_norm > 0)
    r = np.clip(r, -1.0, 1.0)

    df = n - 2
    with np.errstate(divide="ignore"):
        t = r * np.sqrt(df / np.maximum(1.0 - r ** 2, 0.0))
    p = 2.0 * stats.t.sf(np.abs(t), df)
    return r, p


def permutation_p_values(edges: np.ndarray, y: np.ndarray, n_perm: int,
                         rng: np.random.Generator) -> np.ndarray:
    """Two-sided permutation p-values of edge-target correlations"""
    observed, _ = edge_p_values(edges, y)
    exceed = np.zeros(observed.shape[0])
    for _ in range(n_perm):
        permuted, _ = edge_p_values(edges, rng.permutation(y))
        exceed += np.abs(permuted) >= np.abs(observed) - 1e-12
    return (exceed + 1.0) / (n_perm + 1.0)


def cpm_fit_predict(train_edges: np.ndarray, train_y: np.ndarray, test_edges: np.ndarray,
                    p_threshold: float = 0.001) -> BaselineResult:
    """
    Two-sum CPM: significant positive and negative edges summed into strengths, then OLS

    When no edge passes the threshold the training mean is predicted and the
    result is flagged.
    """
    train_edges = np.asarray(train_edges, dtype=float)
    test_edges = np.asarray(test_edges, dtype=float)
    train_y = np.asarray(train_y, dtype=float)
    _check_training(train_edges, train_y)
    r, p = edge_p_values(train_edges, train_y)
    selected = p < p_threshold
    positive = selected & (r > 0)
    negative = selected & (r < 0)
    detail = {"positive_edges": int(positive.sum()), "negative_edges": int(negative.sum())}

    if not selected.any():
        logger.warning(f"No edge passed p < {p_threshold}; predicting the training mean")
        return BaselineResult(np.full(test_edges.shape[0], train_y.mean()), flagged=True, detail=detail)

    def strengths(edges):
        columns = [np.ones(edges.shape[0])]
        for mask in (positive, negative):
            if mask.any():
                columns.append(edges[:, mask].sum(axis=1))
        return np.column_stack(columns)

    coef, *_ = np.linalg.lstsq(strengths(train_edges), train_y, rcond=None)
    return BaselineResult(strengths(test_edges) @ coef, detail=detail)


# ==============================================================================
# --- RIDGE ---
# ==============================================================================

def ridge_solve(X: np.ndarray, y: np.ndarray, lam: float) -> np.ndarray:
    """
    Closed-form ridge coefficients without intercept

    Primal B = (X^T X + lam I)^-1 X^T y when n >= q, dual B = X^T (X X^T + lam I)^-1 y otherwise.
    lam = 0 gives least squares.
    """
    n, q = X.shape
    if n >= q:
        return linalg.solve(X.T @ X + lam * np.eye(q), X.T @ y, assume_a="sym")
    return X.T @ linalg.solve(X @ X.T + lam * np.eye(n), y, assume_a="sym")


def _ridge_predict(train_X, train_y, test_X, lam):
    scaler = StandardScaler().fit(train_X)
    intercept = train_y.mean()
    coef = ridge_solve(scaler.transform(train_X), train_y - intercept, lam)
    return intercept + scaler.transform(test_X) @ coef


def select_lambda(train_edges: np.ndarray, train_y: np.ndarray, lambda_grid: Sequence[float],
                  inner_folds: int = 5, seed: int = 0) -> Tuple[float, np.ndarray]:
    """Inner K-fold squared-error curve over the grid; ties go to the first grid value"""
    folds = KFold(n_splits=min(inner_folds, train_y.shape[0]), shuffle=True, random_state=seed)
    errors = np.zeros(len(lambda_grid))
    for inner_train, inner_test in folds.split(train_edges):
        for k, lam in enumerate(lambda_grid):
            predicted = _ridge_predict(train_edges[inner_train], train_y[inner_train],
                                       train_edges[inner_test], lam)
            errors[k] += ((predicted - train_y[inner_test]) ** 2).sum()
    errors /= train_y.shape[0]
    return float(lambda_grid[int(np.argmin(errors))]), errors


def ridge_fit_predict(train_edges: np.ndarray, train_y: np.ndarray, test_edges: np.ndarray,
                      lambda_grid: Sequence[float], inner_folds: int = 5, seed: int = 0) -> BaselineResult:
    """
    Ridge regression on training-standardized edges with the penalty chosen by inner CV

    Args:
        train_edges: (n_train, E) edges
        train_y: Training targets
        test_edges: (n_test, E) edges
        lambda_grid: Candidate penalties, all > 0
        inner_folds: Inner K-fold count
        seed: Seed of the inner fold shuffle

    Returns:
        BaselineResult with detail["lambda"]
    """
    train_edges = np.asarray(train_edges, dtype=float)
    test_edges = np.asarray(test_edges, dtype=float)
    train_y = np.asarray(train_y, dtype=float)
    _check_training(train_edges, train_y)
    if len(lambda_grid) == 0 or any(lam <= 0 for lam in lambda_grid):
        raise AnalysisError("lambda_grid must be non-empty with positive values")
    lam, errors = select_lambda(train_edges, train_y, lambda_grid, inner_folds, seed)
    logger.debug(f"Ridge penalty {lam:g} selected (inner MSE {errors.min():.4f})")
    predictions = _ridge_predict(train_edges, train_y, test_edges, lam)
    return BaselineResult(predictions, detail={"lambda": lam})
