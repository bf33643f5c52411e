"""
Joint latent-space model of connectomes and a behavior construct
Initialization, Gibbs sweeps, log joint density, chains and posterior summaries

Model, for subject j with V nodes and P standardized indicators:
    C_j[u, v] = D[u, v] + y_ju * y_jv + noise(sigma2_c)      for u < v
    b_jp      = e_p + kappa_j + noise(sigma2_b[p])             for observed p
    (y_j, kappa_j) ~ N((mu, 0), Sigma)
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy import linalg, stats

from .data_manager import run_subjects, standardize_behaviors
from .errors import SamplerError
from .models import (
    BehaviorPanel,
    Dataset,
    FitResult,
    ModelState,
    PosteriorDraws,
    PosteriorSummary,
    PriorConfig,
    SamplerConfig,
)
from .rng import STREAM_INIT, cell_key, chain_rng, make_rng

logger = logging.getLogger(__name__)

# Residual matrices with max |entry| below this carry no factor to extract
DEGENERATE_TOLERANCE = 1e-12


@dataclass
class ModelData:
    """Arrays of one (condition, category) fit, with masked subjects' behaviors missing"""
    condition: str
    category: str
    subject_ids: List[str]
    C: np.ndarray
    B: np.ndarray
    panel: BehaviorPanel
    masked: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.observed = ~np.isnan(self.B)
        self.B_filled = np.where(self.observed, self.B, 0.0)
        self.triu = np.triu_indices(self.V, k=1)

    @property
    def n(self) -> int:
        return self.C.shape[0]

    @property
    def V(self) -> int:
        return self.C.shape[1]

    @property
    def P(self) -> int:
        return self.B.shape[1]

    def index_of(self, subject_ids: Sequence[str]) -> List[int]:
        lookup = {subject: i for i, subject in enumerate(self.subject_ids)}
        return [lookup[subject] for subject in subject_ids]


def model_data(dataset: Dataset, condition: str, category: str,
               masked: Sequence[str] = ()) -> ModelData:
    """
    Build the arrays of one fit

    Masked subjects keep their connectomes but lose every behavior value before
    standardization, so their values cannot reach any computed quantity.

    Args:
        dataset: Loaded dataset
        condition: fMRI condition label
        category: Behavior category
        masked: Subjects whose behaviors are held out

    Returns:
        ModelData with standardized behaviors
    """
    subjects = run_subjects(dataset, condition, category)
    raw = dataset.panel(category)
    masked = sorted(masked)
    panel = standardize_behaviors(raw.mask(masked) if masked else raw)
    return ModelData(
        condition=condition,
        category=category,
        subject_ids=subjects,
        C=dataset.stack(condition, subjects),
        B=panel.rows(subjects),
        panel=panel,
        masked=list(masked),
    )


# ==============================================================================
# --- INITIALIZATION ---
# ==============================================================================

def leading_factor(residual: np.ndarray, max_iter: int = 200, tol: float = 1e-12) -> Optional[np.ndarray]:
    """
    Rank-1 factor y with residual ~ y y^T off the diagonal

    The stored diagonal is zero, so the diagonal is imputed iteratively with y**2.

    Returns:
        The factor, or None when the leading eigenvalue is not positive
    """
    V = residual.shape[0]
    if np.max(np.abs(residual)) < DEGENERATE_TOLERANCE:
        return None
    work = residual.copy()
    diagonal = np.zeros(V)
    y = None
    for _ in range(max_iter):
        np.fill_diagonal(work, diagonal)
        values, vectors = linalg.eigh(work, subset_by_index=[V - 1, V - 1])
        if values[0] <= 0:
            return None
        y = vectors[:, 0] * np.sqrt(values[0])
        updated = y ** 2
        if np.max(np.abs(updated - diagonal)) < tol:
            break
        diagonal = updated
    return y


def _extract_latents(residuals: np.ndarray, rng: np.random.Generator, scale: float) -> Tuple[np.ndarray, bool]:
    n, V = residuals.shape[:2]
    Y = np.empty((n, V))
    fallback = False
    for j in range(n):
        y = leading_factor(residuals[j])
        if y is None:
            fallback = True
            y = rng.normal(0.0, scale, size=V)
        # Per-subject orientation: positive node sum
        Y[j] = y if y.sum() >= 0 else -y
    return Y, fallback


def _offdiag_outer(Y: np.ndarray) -> np.ndarray:
    outer = np.einsum("ju,jv->juv", Y, Y)
    idx = np.arange(Y.shape[1])
    outer[:, idx, idx] = 0.0
    return outer


def init_state(data: ModelData, config: SamplerConfig, chain_id: int = 0,
               restart: int = 0, repeat: int = 0) -> ModelState:
    """
    Deterministic starting state of one chain

    D starts at the mean connectome, each y_j at the leading factor of C_j - D,
    followed by alternating refinement rounds. Chains and restarts other than
    (0, 0) perturb the latents with seeded Gaussian noise.
    """
    rng = make_rng(config.seed, STREAM_INIT, cell_key(data.condition, data.category), repeat, restart, chain_id)
    priors = config.priors
    C, n, V = data.C, data.n, data.V

    D = C.mean(axis=0)
    np.fill_diagonal(D, 0.0)
    Y, fallback = _extract_latents(C - D, rng, config.init_jitter)
    for _ in range(0 if fallback else config.init_refine_rounds):
        D = (C - _offdiag_outer(Y)).mean(axis=0)
        np.fill_diagonal(D, 0.0)
        Y, fallback = _extract_latents(C - D, rng, config.init_jitter)
        if fallback:
            break
    if fallback:
        logger.warning(
            f"Degenerate residual connectomes in {data.condition}/{data.category}: "
            f"using seeded Gaussian latents for at least one subject"
        )

    observed_counts = data.observed.sum(axis=1)
    kappa = np.divide(data.B_filled.sum(axis=1), observed_counts,
                      out=np.zeros(n), where=observed_counts > 0)

    if config.sign_anchor == "behavior":
        training = observed_counts > 0
        node_means = Y.mean(axis=1)
        if training.sum() >= 2 and np.std(node_means[training]) > 0 and np.std(kappa[training]) > 0:
            if np.corrcoef(node_means[training], kappa[training])[0, 1] < 0:
                Y = -Y

    if (restart, chain_id) != (0, 0):
        Y = Y + rng.normal(0.0, config.init_jitter, size=Y.shape)
        kappa = kappa + rng.normal(0.0, config.init_jitter, size=n)

    mu = Y.mean(axis=0)
    Z = np.column_stack([Y, kappa])
    if n >= 2:
        Sigma = np.cov(Z, rowvar=False) + config.init_ridge * np.eye(V + 1)
    else:
        Sigma = np.eye(V + 1)

    e = np.array([
        data.B[data.observed[:, p], p].mean() if data.observed[:, p].any() else 0.0
        for p in range(data.P)
    ])
    floor = priors.variance_floor
    iu = data.triu
    residual = C[:, iu[0], iu[1]] - D[iu] - Y[:, iu[0]] * Y[:, iu[1]]
    sigma2_c = max(float(np.var(residual)), floor)
    sigma2_b = np.empty(data.P)
    for p in range(data.P):
        rows = data.observed[:, p]
        resid = data.B[rows, p] - kappa[rows] - e[p]
        sigma2_b[p] = max(float(np.var(resid)), floor) if rows.sum() >= 2 else 1.0

    state = ModelState(D=D, e=e, mu=mu, Sigma=(Sigma + Sigma.T) / 2, sigma2_c=sigma2_c,
                       sigma2_b=sigma2_b, Y=Y, kappa=kappa, subject_ids=list(data.subject_ids),
                       init_fallback=fallback)
    state.check()
    return state


def perturb_state(state: ModelState, rng: np.random.Generator, scale: float) -> ModelState:
    """Copy of a state with Gaussian noise added to every latent"""
    perturbed = state.copy()
    perturbed.Y = perturbed.Y + rng.normal(0.0, scale, size=perturbed.Y.shape)
    perturbed.kappa = perturbed.kappa + rng.normal(0.0, scale, size=perturbed.kappa.shape)
    return perturbed


# ==============================================================================
# --- FULL CONDITIONALS ---
# ==============================================================================

def _precision(Sigma: np.ndarray) -> np.ndarray:
    factor = linalg.cho_factor(Sigma, lower=True)
    Q = linalg.cho_solve(factor, np.eye(Sigma.shape[0]))
    return (Q + Q.T) / 2


def _latent_prior_terms(Z: np.ndarray, m: np.ndarray, Q: np.ndarray, k: int) -> Tuple[np.ndarray, float]:
    # Gaussian conditional of coordinate k given the rest, as (precision * mean, precision)
    dev = Z - m
    others = dev @ Q[:, k] - Q[k, k] * dev[:, k]
    return Q[k, k] * m[k] - others, Q[k, k]


def _node_conditionals(Z: np.ndarray, R: np.ndarray, v: int, Q: np.ndarray, m: np.ndarray,
                       sigma2_c: float, V: int) -> Tuple[np.ndarray, np.ndarray]:
    Y = Z[:, :V]
    prior_linear, prior_precision = _latent_prior_terms(Z, m, Q, v)
    linear = np.einsum("ju,ju->j", R[:, :, v], Y) / sigma2_c
    precision = ((Y ** 2).sum(axis=1) - Y[:, v] ** 2) / sigma2_c
    total = prior_precision + precision
    return (prior_linear + linear) / total, 1.0 / total


def y_conditional(state: ModelState, data: ModelData, j: int, v: int) -> Tuple[float, float]:
    """Mean and variance of y_jv given everything else"""
    R = data.C - state.D
    means, variances = _node_conditionals(state.Z, R, v, _precision(state.Sigma),
                                          state.latent_mean, state.sigma2_c, state.V)
    return float(means[j]), float(variances[j])


def _kappa_conditionals(Z: np.ndarray, data: ModelData, e: np.ndarray, sigma2_b: np.ndarray,
                        Q: np.ndarray, m: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    K = Z.shape[1] - 1
    prior_linear, prior_precision = _latent_prior_terms(Z, m, Q, K)
    weights = data.observed / sigma2_b
    linear = (weights * (data.B_filled - e)).sum(axis=1)
    total = prior_precision + weights.sum(axis=1)
    return (prior_linear + linear) / total, 1.0 / total


def kappa_conditional(state: ModelState, data: ModelData, j: int) -> Tuple[float, float]:
    """Mean and variance of kappa_j given everything else (prior-only when all indicators are missing)"""
    means, variances = _kappa_conditionals(state.Z, data, state.e, state.sigma2_b,
                                           _precision(state.Sigma), state.latent_mean)
    return float(means[j]), float(variances[j])


def intercept_conditional(state: ModelState, data: ModelData,
                          priors: PriorConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Means and variances of the upper-triangle entries of D"""
    iu = data.triu
    Y = state.Y
    residual = data.C[:, iu[0], iu[1]] - Y[:, iu[0]] * Y[:, iu[1]]
    precision = data.n / state.sigma2_c + 1.0 / priors.intercept_var
    mean = residual.sum(axis=0) / state.sigma2_c / precision
    return mean, np.full(mean.shape, 1.0 / precision)


def behavior_intercept_conditional(state: ModelState, data: ModelData,
                                   priors: PriorConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Means and variances of the indicator intercepts e"""
    counts = data.observed.sum(axis=0)
    sums = (data.observed * (data.B_filled - state.kappa[:, None])).sum(axis=0)
    precision = counts / state.sigma2_b + 1.0 / priors.behavior_intercept_var
    return sums / state.sigma2_b / precision, 1.0 / precision


def mean_conditional(state: ModelState, priors: PriorConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Mean vector and covariance matrix of the node-latent mean mu"""
    V = state.V
    Q = _precision(state.Sigma)
    precision = state.n * Q[:V, :V] + np.eye(V) / priors.latent_mean_var
    linear = (Q @ state.Z.sum(axis=0))[:V]
    covariance = linalg.cho_solve(linalg.cho_factor(precision, lower=True), np.eye(V))
    covariance = (covariance + covariance.T) / 2
    return covariance @ linear, covariance


def sigma_conditional(state: ModelState, priors: PriorConfig) -> Tuple[float, np.ndarray]:
    """Inverse-Wishart degrees of freedom and scale matrix of Sigma"""
    dim = state.V + 1
    dev = state.Z - state.latent_mean
    df = dim - 1 + priors.wishart_df_offset + state.n
    scale = priors.wishart_scale * np.eye(dim) + dev.T @ dev
    return float(df), (scale + scale.T) / 2


def noise_conditional(state: ModelState, data: ModelData,
                      priors: PriorConfig) -> Tuple[Tuple[float, float], np.ndarray, np.ndarray]:
    """
    Inverse-gamma (shape, scale) of sigma2_c and of each sigma2_b[p]

    Returns:
        ((shape_c, scale_c), shapes_b, scales_b)
    """
    iu = data.triu
    Y = state.Y
    residual = data.C[:, iu[0], iu[1]] - state.D[iu] - Y[:, iu[0]] * Y[:, iu[1]]
    shape_c = priors.noise_shape + residual.size / 2.0
    scale_c = priors.noise_scale + float((residual ** 2).sum()) / 2.0

    behavior_residual = np.where(data.observed, data.B_filled - state.e - state.kappa[:, None], 0.0)
    shapes_b = priors.noise_shape + data.observed.sum(axis=0) / 2.0
    scales_b = priors.noise_scale + (behavior_residual ** 2).sum(axis=0) / 2.0
    return (shape_c, scale_c), shapes_b, scales_b


# ==============================================================================
# --- GIBBS SWEEP ---
# ==============================================================================

def sample_latents(state: ModelState, data: ModelData, rng: np.random.Generator):
    """Update every y_jv (node by node, vectorized over subjects) then every kappa_j, in place"""
    V = state.V
    Q = _precision(state.Sigma)
    m = state.latent_mean
    Z = state.Z
    R = data.C - state.D
    for v in range(V):
        means, variances = _node_conditionals(Z, R, v, Q, m, state.sigma2_c, V)
        Z[:, v] = means + np.sqrt(variances) * rng.standard_normal(data.n)
    means, variances = _kappa_conditionals(Z, data, state.e, state.sigma2_b, Q, m)
    Z[:, V] = means + np.sqrt(variances) * rng.standard_normal(data.n)
    state.Y = Z[:, :V].copy()
    state.kappa = Z[:, V].copy()


def sample_intercepts(state: ModelState, data: ModelData, priors: PriorConfig,
                      rng: np.random.Generator):
    """Update D then e, in place"""
    mean, variance = intercept_conditional(state, data, priors)
    draws = mean + np.sqrt(variance) * rng.standard_normal(mean.shape)
    D = np.zeros((data.V, data.V))
    D[data.triu] = draws
    state.D = D + D.T

    mean, variance = behavior_intercept_conditional(state, data, priors)
    state.e = mean + np.sqrt(variance) * rng.standard_normal(mean.shape)


def sample_mean(state: ModelState, priors: PriorConfig, rng: np.random.Generator):
    """Update mu, in place"""
    mean, covariance = mean_conditional(state, priors)
    lower = np.linalg.cholesky(covariance)
    state.mu = mean + lower @ rng.standard_normal(mean.shape)


def sample_sigma(state: ModelState, priors: PriorConfig, rng: np.random.Generator):
    """Update Sigma from its inverse-Wishart conditional, in place"""
    df, scale = sigma_conditional(state, priors)
    scale = scale + priors.cholesky_jitter * np.eye(scale.shape[0])
    draw = stats.invwishart.rvs(df=df, scale=scale, random_state=rng)
    state.Sigma = (draw + draw.T) / 2


def sample_noise(state: ModelState, data: ModelData, priors: PriorConfig,
                 rng: np.random.Generator):
    """Update sigma2_c and sigma2_b, in place"""
    (shape_c, scale_c), shapes_b, scales_b = noise_conditional(state, data, priors)
    floor = priors.variance_floor
    state.sigma2_c = max(float(stats.invgamma.rvs(shape_c, scale=scale_c, random_state=rng)), floor)
    draws = stats.invgamma.rvs(shapes_b, scale=scales_b, random_state=rng)
    state.sigma2_b = np.maximum(np.atleast_1d(draws), floor)


def gibbs_step(state: ModelState, data: ModelData, config: SamplerConfig,
               rng: np.random.Generator, iteration: Optional[int] = None) -> ModelState:
    """
    One full sweep in fixed order: y, kappa, D, e, mu, Sigma, noise variances

    Args:
        state: Current state (left untouched)
        data: Arrays of the fit
        config: Sampler configuration (priors)
        rng: Generator of this chain
        iteration: Sweep index reported in errors

    Returns:
        New state
    """
    priors = config.priors
    new = state.copy()
    try:
        sample_latents(new, data, rng)
        sample_intercepts(new, data, priors, rng)
        sample_mean(new, priors, rng)
        sample_sigma(new, priors, rng)
        sample_noise(new, data, priors, rng)
    except (np.linalg.LinAlgError, linalg.LinAlgError, ValueError) as e:
        raise SamplerError(f"Numerical failure during sweep: {e}", iteration) from e
    new.check(iteration)
    return new


# ==============================================================================
# --- LOG JOINT ---
# ==============================================================================

def log_joint(state: ModelState, data: ModelData, priors: PriorConfig) -> float:
    """
    Log joint density of data, latents and parameters

    Connectome terms use the upper triangle only; behavior terms use observed
    entries only, so held-out subjects contribute through their latents alone.
    """
    iu = data.triu
    Y = state.Y
    residual = data.C[:, iu[0], iu[1]] - state.D[iu] - Y[:, iu[0]] * Y[:, iu[1]]
    total = stats.norm.logpdf(residual, scale=np.sqrt(state.sigma2_c)).sum()

    fitted = state.e + state.kappa[:, None]
    behavior = stats.norm.logpdf(data.B_filled, loc=fitted, scale=np.sqrt(state.sigma2_b))
    total += behavior[data.observed].sum()

    total += np.sum(stats.multivariate_normal.logpdf(state.Z, mean=state.latent_mean, cov=state.Sigma))

    dim = state.V + 1
    total += stats.norm.logpdf(state.D[iu], scale=np.sqrt(priors.intercept_var)).sum()
    total += stats.norm.logpdf(state.e, scale=np.sqrt(priors.behavior_intercept_var)).sum()
    total += stats.norm.logpdf(state.mu, scale=np.sqrt(priors.latent_mean_var)).sum()
    total += stats.invwishart.logpdf(state.Sigma, df=dim - 1 + priors.wishart_df_offset,
                                     scale=priors.wishart_scale * np.eye(dim))
    total += stats.invgamma.logpdf(state.sigma2_c, priors.noise_shape, scale=priors.noise_scale)
    total += stats.invgamma.logpdf(state.sigma2_b, priors.noise_shape, scale=priors.noise_scale).sum()
    return float(total)


# ==============================================================================
# --- CHAINS ---
# ==============================================================================

def run_chain(data: ModelData, config: SamplerConfig, chain_id: int = 0, restart: int = 0,
              repeat: int = 0, designated: Optional[Sequence[str]] = None) -> Tuple[PosteriorDraws, ModelState]:
    """
    Initialize then sweep burn_in + samples * thin times

    Args:
        data: Arrays of the fit
        config: Sampler configuration
        chain_id: Chain index (selects the RNG stream)
        restart: Restart index (selects the RNG stream)
        repeat: CV repeat index (selects the RNG stream)
        designated: Subjects whose kappa draws are kept (defaults to the masked subjects)

    Returns:
        Retained draws and the final state
    """
    designated = list(data.masked if designated is None else designated)
    rows = data.index_of(designated)
    rng = chain_rng(config.seed, chain_id, restart, repeat, cell_key(data.condition, data.category))
    state = init_state(data, config, chain_id=chain_id, restart=restart, repeat=repeat)

    n_keep = config.samples
    iterations = np.empty(n_keep, dtype=int)
    cov = np.empty((n_keep, data.V))
    joint = np.empty(n_keep)
    e = np.empty((n_keep, data.P))
    sigma2_c = np.empty(n_keep)
    kappa = np.empty((n_keep, len(rows)))

    kept = 0
    for sweep in range(1, config.total_sweeps + 1):
        state = gibbs_step(state, data, config, rng, iteration=sweep)
        if sweep > config.burn_in and (sweep - config.burn_in) % config.thin == 0:
            iterations[kept] = sweep
            cov[kept] = state.cross_covariance
            joint[kept] = log_joint(state, data, config.priors)
            e[kept] = state.e
            sigma2_c[kept] = state.sigma2_c
            kappa[kept] = state.kappa[rows]
            kept += 1
        if sweep % 1000 == 0:
            logger.debug(f"{data.condition}/{data.category} chain {chain_id} restart {restart}: sweep {sweep}")

    if not np.all(np.isfinite(joint)):
        raise SamplerError("Non-finite log joint among retained draws", parameter="log_joint")
    draws = PosteriorDraws(chain_id=chain_id, iterations=iterations, cov=cov, log_joint=joint,
                           e=e, sigma2_c=sigma2_c, kappa=kappa, designated_ids=designated)
    return draws, state


Scorer = Callable[[List[PosteriorDraws]], float]


def fit_model(data: ModelData, config: SamplerConfig, select_by: str = "train-fit",
              scorer: Optional[Scorer] = None, repeat: int = 0, n_jobs: int = 1,
              designated: Optional[Sequence[str]] = None) -> FitResult:
    """
    Run every (restart, chain) and keep the best restart

    Restarts are ranked by the mean final training log joint over their chains,
    or by ``scorer`` (higher is better) when select_by is "test-fit".
    """
    if select_by == "test-fit" and scorer is None:
        raise SamplerError("test-fit selection needs a scorer")
    tasks = [(restart, chain) for restart in range(config.inits) for chain in range(config.chains)]
    outputs = Parallel(n_jobs=n_jobs)(
        delayed(run_chain)(data, config, chain, restart, repeat, designated)
        for restart, chain in tasks
    )

    by_restart = {restart: [] for restart in range(config.inits)}
    for (restart, _), output in zip(tasks, outputs):
        by_restart[restart].append(output)

    scores = []
    for restart in range(config.inits):
        draws = [draw for draw, _ in by_restart[restart]]
        if select_by == "test-fit":
            scores.append(float(scorer(draws)))
        else:
            scores.append(float(np.mean([draw.log_joint[-1] for draw in draws])))
    best = int(np.argmax(scores))
    if config.inits > 1:
        logger.info(
            f"{data.condition}/{data.category}: restart {best} selected by {select_by} "
            f"(scores {', '.join(f'{score:.2f}' for score in scores)})"
        )
    return FitResult(
        draws=[draw for draw, _ in by_restart[best]],
        restart=best,
        restart_scores=scores,
        select_by=select_by,
        final_states=[state for _, state in by_restart[best]],
        panel=data.panel,
    )


# ==============================================================================
# --- SUMMARIES ---
# ==============================================================================

def posterior_summary(draws: Sequence[PosteriorDraws]) -> PosteriorSummary:
    """Pool chains and summarize Sigma[v, V+1] per node"""
    stacked = [draw.cov for draw in draws if draw.n_draws > 0]
    if not stacked:
        raise SamplerError("Cannot summarize an empty set of draws")
    pooled = np.vstack(stacked)
    ddof = 1 if pooled.shape[0] > 1 else 0
    low, high = np.quantile(pooled, [0.05, 0.95], axis=0)
    return PosteriorSummary(
        node_ids=list(range(1, pooled.shape[1] + 1)),
        cov_mean=pooled.mean(axis=0),
        cov_sd=pooled.std(axis=0, ddof=ddof),
        ci05=low,
        ci95=high,
    )


def average_summaries(summaries: Sequence[PosteriorSummary]) -> PosteriorSummary:
    """Mean of per-repeat summaries (covariance averaged over CV repeats)"""
    if not summaries:
        raise SamplerError("Cannot average an empty set of summaries")
    return PosteriorSummary(
        node_ids=list(summaries[0].node_ids),
        cov_mean=np.mean([s.cov_mean for s in summaries], axis=0),
        cov_sd=np.mean([s.cov_sd for s in summaries], axis=0),
        ci05=np.mean([s.ci05 for s in summaries], axis=0),
        ci95=np.mean([s.ci95 for s in summaries], axis=0),
    )


def trace_frame(draws: Sequence[PosteriorDraws]) -> pd.DataFrame:
    """Long-format trace: chain,iter,log_joint,node_id,cov_draw"""
    frames = []
    for draw in draws:
        n_draws, V = draw.cov.shape
        frames.append(pd.DataFrame({
            "chain": np.repeat(draw.chain_id, n_draws * V),
            "iter": np.repeat(draw.iterations, V),
            "log_joint": np.repeat(draw.log_joint, V),
            "node_id": np.tile(np.arange(1, V + 1), n_draws),
            "cov_draw": draw.cov.ravel(),
        }))
    if not frames:
        return pd.DataFrame(columns=["chain", "iter", "log_joint", "node_id", "cov_draw"])
    return pd.concat(frames, ignore_index=True)


def chains_by_node(trace: pd.DataFrame) -> np.ndarray:
    """Trace table back to an array (chains, draws, nodes)"""
    chains = sorted(trace["chain"].unique())
    arrays = []
    for chain in chains:
        wide = trace[trace["chain"] == chain].pivot(index="iter", columns="node_id", values="cov_draw")
        arrays.append(wide.sort_index().to_numpy())
    lengths = {array.shape[0] for array in arrays}
    if len(lengths) > 1:
        shortest = min(lengths)
        arrays = [array[:shortest] for array in arrays]
    return np.stack(arrays)
