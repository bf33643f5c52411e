"""
Data Models for the Connectome Prediction System
Defines the core data structures and configuration used throughout the application
"""

from dataclasses import dataclass, field, asdict, replace
from typing import Dict, List, Optional, Tuple
import math

import numpy as np
import pandas as pd

from .errors import AnalysisError, ConfigError, DataValidationError, SamplerError


CANONICAL_NETWORKS: Tuple[str, ...] = (
    "Default Mode",
    "Medial Frontal",
    "Fronto-parietal",
    "Motor",
    "Visual I",
    "Visual II",
    "Visual Association",
    "Limbic",
    "Basal Ganglia",
    "Cerebellum",
)
REFERENCE_NETWORK = "Default Mode"

AVERAGE_CONDITION = "Average"
REFERENCE_CONDITION = "Rest1"
REST_CONDITIONS: Tuple[str, ...] = ("Rest1", "Rest2")
TASK_CONDITIONS: Tuple[str, ...] = ("gradCPT", "EN-back", "SST", "Eyes")
# Dummy order of the condition-effect regression
CONDITION_DUMMIES: Tuple[str, ...] = ("Rest2", "Average", "EN-back", "SST", "Eyes", "gradCPT")
CANONICAL_CONDITIONS: Tuple[str, ...] = (REFERENCE_CONDITION,) + CONDITION_DUMMIES

METHODS: Tuple[str, ...] = ("latentsna", "cpm", "ridge")
SELECT_MODES: Tuple[str, ...] = ("train-fit", "test-fit")
SIGN_ANCHORS: Tuple[str, ...] = ("latent_mean", "behavior")
# Fewest scored pairs behind a defined accuracy correlation
MIN_TEST = 3


# ==============================================================================
# --- INGEST ---
# ==============================================================================

@dataclass(frozen=True)
class AtlasEntry:
    """One parcellation node and its functional network"""
    node_id: int
    network: str
    hemisphere: Optional[str] = None
    coords: Optional[Tuple[float, float, float]] = None


@dataclass
class Atlas:
    """Node-to-network parcellation (e.g. Shen-268)"""
    entries: List[AtlasEntry]

    def __post_init__(self):
        ids = sorted(entry.node_id for entry in self.entries)
        if ids != list(range(1, len(ids) + 1)):
            raise DataValidationError(
                f"Atlas node ids must be exactly 1..{len(ids)} without gaps or duplicates"
            )
        for entry in self.entries:
            if entry.network not in CANONICAL_NETWORKS:
                raise DataValidationError(
                    f"Unknown network label '{entry.network}' for node {entry.node_id}"
                )
        self.entries = sorted(self.entries, key=lambda entry: entry.node_id)

    @property
    def V(self) -> int:
        return len(self.entries)

    @property
    def node_ids(self) -> List[int]:
        return [entry.node_id for entry in self.entries]

    def network_of(self, node_id: int) -> str:
        """Get the network label of a node"""
        if not 1 <= node_id <= self.V:
            raise DataValidationError(f"Node {node_id} is not in the atlas (V={self.V})")
        return self.entries[node_id - 1].network

    def nodes_in(self, network: str) -> List[int]:
        """Get all node ids belonging to one network"""
        return [entry.node_id for entry in self.entries if entry.network == network]

    def networks(self) -> List[str]:
        """Network label of every node, in node order"""
        return [entry.network for entry in self.entries]


@dataclass
class Connectome:
    """Fisher-z functional connectivity matrix of one subject under one condition"""
    subject_id: str
    condition: str
    matrix: np.ndarray

    @property
    def V(self) -> int:
        return self.matrix.shape[0]


@dataclass
class BehaviorPanel:
    """Subjects x indicators table for one neuropsychological category

    Missing entries are NaN and reported through ``missing``; they are never zero-filled.
    ``scaling`` holds per-indicator (mean, sd) once the panel is standardized.
    """
    category: str
    subject_ids: List[str]
    indicators: List[str]
    values: np.ndarray
    scaling: Optional[Dict[str, Tuple[float, float]]] = None

    @property
    def P(self) -> int:
        return len(self.indicators)

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.values)

    @property
    def is_standardized(self) -> bool:
        return self.scaling is not None

    def index_of(self, subject_id: str) -> int:
        try:
            return self.subject_ids.index(subject_id)
        except ValueError:
            raise DataValidationError(
                f"Subject {subject_id} not found in behavior panel '{self.category}'"
            ) from None

    def rows(self, subject_ids: List[str]) -> np.ndarray:
        """Values for the given subjects, in the given order"""
        return self.values[[self.index_of(subject_id) for subject_id in subject_ids]]

    def mask(self, subject_ids: List[str]) -> "BehaviorPanel":
        """Copy of the panel with the given subjects' values set missing"""
        values = self.values.copy()
        for subject_id in subject_ids:
            values[self.index_of(subject_id)] = np.nan
        return replace(self, values=values)

    def destandardize(self, values: np.ndarray) -> np.ndarray:
        """Map standardized values (... x P) back to raw indicator units"""
        if self.scaling is None:
            return np.asarray(values, dtype=float)
        means = np.array([self.scaling[name][0] for name in self.indicators])
        sds = np.array([self.scaling[name][1] for name in self.indicators])
        return np.asarray(values, dtype=float) * sds + means

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.values, columns=self.indicators)
        frame.insert(0, "subject_id", self.subject_ids)
        return frame


@dataclass
class Dataset:
    """All connectomes, behavior panels and the atlas of one study"""
    V: int
    conditions: List[str]
    connectomes: Dict[Tuple[str, str], Connectome]
    behaviors: Dict[str, BehaviorPanel]
    atlas: Atlas

    @property
    def subjects(self) -> List[str]:
        return sorted({subject for subject, _ in self.connectomes})

    def subjects_for(self, condition: str) -> List[str]:
        return sorted(subject for subject, cond in self.connectomes if cond == condition)

    def connectome(self, subject_id: str, condition: str) -> Connectome:
        try:
            return self.connectomes[(subject_id, condition)]
        except KeyError:
            raise DataValidationError(
                f"No connectome for subject {subject_id} under condition {condition}"
            ) from None

    def stack(self, condition: str, subject_ids: List[str]) -> np.ndarray:
        """Connectomes of the given subjects as an (n, V, V) array"""
        return np.stack([self.connectome(s, condition).matrix for s in subject_ids])

    def panel(self, category: str) -> BehaviorPanel:
        try:
            return self.behaviors[category]
        except KeyError:
            raise DataValidationError(f"Unknown behavior category '{category}'") from None


# ==============================================================================
# --- MODEL ---
# ==============================================================================

@dataclass
class PriorConfig:
    """Conjugate prior hyperparameters of the joint model"""
    intercept_var: float = 10.0
    behavior_intercept_var: float = 10.0
    latent_mean_var: float = 10.0
    wishart_df_offset: int = 3
    wishart_scale: float = 1.0
    noise_shape: float = 2.0
    noise_scale: float = 1.0
    variance_floor: float = 1e-8
    cholesky_jitter: float = 1e-8

    def __post_init__(self):
        for name in ("intercept_var", "behavior_intercept_var", "latent_mean_var",
                     "wishart_scale", "noise_shape", "noise_scale"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"Prior hyperparameter {name} must be positive")
        if self.wishart_df_offset < 2:
            raise ConfigError("wishart_df_offset must be at least 2 (df > dimension)")


@dataclass
class SamplerConfig:
    """MCMC settings for one fit"""
    burn_in: int = 5000
    samples: int = 15000
    thin: int = 1
    chains: int = 1
    inits: int = 10
    seed: int = 0
    sign_anchor: str = "latent_mean"
    init_refine_rounds: int = 10
    init_jitter: float = 0.1
    init_ridge: float = 1e-3
    priors: PriorConfig = field(default_factory=PriorConfig)

    def __post_init__(self):
        if self.burn_in < 0:
            raise ConfigError(f"burn_in must be >= 0, got {self.burn_in}")
        for name in ("samples", "thin", "chains", "inits"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.sign_anchor not in SIGN_ANCHORS:
            raise ConfigError(f"sign_anchor must be one of {SIGN_ANCHORS}")
        if self.init_refine_rounds < 0:
            raise ConfigError("init_refine_rounds must be >= 0")

    @property
    def total_sweeps(self) -> int:
        return self.burn_in + self.samples * self.thin

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class ModelState:
    """All sampler parameters of the joint model

    Latents are stacked by subject in ``subject_ids`` order. The latent law is
    N((mu, 0), Sigma); Sigma[:V, V] is the node-construct covariance.
    """
    D: np.ndarray
    e: np.ndarray
    mu: np.ndarray
    Sigma: np.ndarray
    sigma2_c: float
    sigma2_b: np.ndarray
    Y: np.ndarray
    kappa: np.ndarray
    subject_ids: List[str]
    init_fallback: bool = False

    @property
    def V(self) -> int:
        return self.D.shape[0]

    @property
    def P(self) -> int:
        return self.e.shape[0]

    @property
    def n(self) -> int:
        return len(self.subject_ids)

    @property
    def Z(self) -> np.ndarray:
        """Stacked latents (n, V+1): node coordinates then construct score"""
        return np.column_stack([self.Y, self.kappa])

    @property
    def latent_mean(self) -> np.ndarray:
        return np.append(self.mu, 0.0)

    @property
    def cross_covariance(self) -> np.ndarray:
        return self.Sigma[: self.V, self.V].copy()

    def copy(self) -> "ModelState":
        return ModelState(
            D=self.D.copy(), e=self.e.copy(), mu=self.mu.copy(), Sigma=self.Sigma.copy(),
            sigma2_c=float(self.sigma2_c), sigma2_b=self.sigma2_b.copy(), Y=self.Y.copy(),
            kappa=self.kappa.copy(), subject_ids=list(self.subject_ids),
            init_fallback=self.init_fallback,
        )

    def check(self, iteration: Optional[int] = None):
        """Raise SamplerError when a state invariant is broken"""
        for name in ("D", "e", "mu", "Sigma", "sigma2_b", "Y", "kappa"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise SamplerError("Non-finite value produced", iteration, name)
        if not math.isfinite(self.sigma2_c) or self.sigma2_c <= 0:
            raise SamplerError("sigma2_c must be finite and positive", iteration, "sigma2_c")
        if np.any(self.sigma2_b <= 0):
            raise SamplerError("sigma2_b must be positive", iteration, "sigma2_b")
        if not np.allclose(self.Sigma, self.Sigma.T, atol=1e-10):
            raise SamplerError("Sigma is not symmetric", iteration, "Sigma")
        try:
            np.linalg.cholesky(self.Sigma)
        except np.linalg.LinAlgError:
            raise SamplerError("Sigma is not positive definite", iteration, "Sigma") from None


@dataclass
class PosteriorDraws:
    """Retained draws of one chain"""
    chain_id: int
    iterations: np.ndarray
    cov: np.ndarray
    log_joint: np.ndarray
    e: np.ndarray
    sigma2_c: np.ndarray
    kappa: np.ndarray
    designated_ids: List[str] = field(default_factory=list)

    @property
    def n_draws(self) -> int:
        return len(self.iterations)


@dataclass
class PosteriorSummary:
    """Per-node posterior summary of the node-construct covariance"""
    node_ids: List[int]
    cov_mean: np.ndarray
    cov_sd: np.ndarray
    ci05: np.ndarray
    ci95: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "node_id": self.node_ids,
            "cov_mean": self.cov_mean,
            "cov_sd": self.cov_sd,
            "ci05": self.ci05,
            "ci95": self.ci95,
        })

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "PosteriorSummary":
        frame = frame.sort_values("node_id")
        return cls(
            node_ids=[int(node) for node in frame["node_id"]],
            cov_mean=frame["cov_mean"].to_numpy(dtype=float),
            cov_sd=frame["cov_sd"].to_numpy(dtype=float),
            ci05=frame["ci05"].to_numpy(dtype=float),
            ci95=frame["ci95"].to_numpy(dtype=float),
        )


@dataclass
class FitResult:
    """Outcome of a multi-restart fit: the selected restart's chains"""
    draws: List[PosteriorDraws]
    restart: int
    restart_scores: List[float]
    select_by: str
    final_states: List[ModelState]
    panel: BehaviorPanel


# ==============================================================================
# --- PREDICTION ---
# ==============================================================================

@dataclass
class CVConfig:
    """Cross-validation and baseline settings"""
    train_fraction: float = 0.9
    repeats: int = 5
    partitioned: bool = False
    select_by: str = "train-fit"
    methods: Tuple[str, ...] = ("latentsna",)
    cpm_threshold: float = 0.001
    ridge_lambdas: Tuple[float, ...] = tuple(10.0 ** k for k in range(-3, 10))
    inner_folds: int = 5

    def __post_init__(self):
        if not 0.5 < self.train_fraction < 0.95:
            raise ConfigError(f"train_fraction must lie in (0.5, 0.95), got {self.train_fraction}")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if self.select_by not in SELECT_MODES:
            raise ConfigError(f"select_by must be one of {SELECT_MODES}")
        unknown = [method for method in self.methods if method not in METHODS]
        if unknown or not self.methods:
            raise ConfigError(f"methods must be a non-empty subset of {METHODS}, got {self.methods}")
        if not self.ridge_lambdas or any(lam <= 0 for lam in self.ridge_lambdas):
            raise ConfigError("ridge_lambdas must be non-empty and positive")

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class SplitPlan:
    """Train/test subject splits shared by every method"""
    repeats: List[Tuple[List[str], List[str]]]
    train_fraction: float
    seed: int
    partitioned: bool = False


@dataclass
class AccuracyRecord:
    """
    One prediction-accuracy observation

    r is NaN when the correlation is undefined (constant predictions or fewer
    than three scored pairs); otherwise |r| <= 1 and n_test >= 3.
    """
    condition: str
    category: str
    indicator: str
    repeat_index: int
    r: float
    n_test: int
    method: str = "latentsna"

    def __post_init__(self):
        if math.isnan(self.r):
            return
        if abs(self.r) > 1.0 + 1e-12:
            raise AnalysisError(f"Correlation {self.r} outside [-1, 1] for {self.condition}/{self.indicator}")
        if self.n_test < MIN_TEST:
            raise AnalysisError(f"r of {self.condition}/{self.indicator} rests on {self.n_test} pairs (< {MIN_TEST})")

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class BaselineResult:
    """Predictions of one baseline fit; detail records selected edge counts or the chosen lambda"""
    predictions: np.ndarray
    flagged: bool = False
    detail: Dict = field(default_factory=dict)


@dataclass
class RunResults:
    """Everything a fit or cv run produces, keyed by (condition, category[, repeat])"""
    predictions: pd.DataFrame = field(default_factory=pd.DataFrame)
    records: List[AccuracyRecord] = field(default_factory=list)
    summaries: Dict[Tuple[str, str], PosteriorSummary] = field(default_factory=dict)
    traces: Dict[Tuple[str, str, int], pd.DataFrame] = field(default_factory=dict)
    split_hashes: Dict[str, str] = field(default_factory=dict)
    restarts: List[Dict] = field(default_factory=list)

    @property
    def is_empty(self) -> bool:
        return self.predictions.empty and not self.records and not self.summaries and not self.traces


# ==============================================================================
# --- ANALYSIS ---
# ==============================================================================

@dataclass
class BiomarkerSet:
    """Top positive and negative covariance nodes of one fit"""
    condition: str
    category: str
    positive: List[int]
    negative: List[int]
    values: Dict[int, float]


@dataclass
class RegressionTerm:
    estimate: float
    std_error: float
    t_value: float
    p_value: float
    sig_code: str


@dataclass
class RegressionResult:
    """OLS fit in the layout of a regression summary table"""
    coefficients: Dict[str, RegressionTerm]
    r_squared: float
    n: int
    residual_df: int
    f_pvalue: float = float("nan")

    def to_dict(self) -> Dict:
        return {
            "coefficients": {name: asdict(term) for name, term in self.coefficients.items()},
            "r_squared": self.r_squared,
            "n": self.n,
            "residual_df": self.residual_df,
            "f_pvalue": self.f_pvalue,
        }


@dataclass
class ConditionEffectModel:
    """Accuracy regressed on condition dummies for one category"""
    category: str
    reference_condition: str
    dummies: List[str]
    result: RegressionResult


# ==============================================================================
# --- REPORT / CLI ---
# ==============================================================================

@dataclass
class RunManifest:
    """Reproducibility record of one run directory"""
    version: str
    command: str
    config: Dict
    input_digests: Dict[str, str]
    split_hash: Optional[str]
    outputs: Dict[str, str]
    timings: Dict[str, float]
    warning_count: int = 0

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class RunConfig:
    """Configuration of one command-line invocation"""
    command: str
    manifest_path: Optional[str] = None
    out_dir: str = "runs/latest"
    conditions: Optional[List[str]] = None
    categories: Optional[List[str]] = None
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    cv: CVConfig = field(default_factory=CVConfig)
    threads: int = 1
    run_dir: Optional[str] = None
    log_dir: Optional[str] = None
    verbose: bool = False

    def __post_init__(self):
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")

    def to_dict(self) -> Dict:
        return asdict(self)


# ==============================================================================
# --- SIMULATION ---
# ==============================================================================

@dataclass
class GenerativeParams:
    """Ground-truth parameters of a synthetic study"""
    V: int
    n_subjects: int
    P: int
    Sigma_true: np.ndarray
    D_true: np.ndarray
    e_true: np.ndarray
    sigma2_c: float
    sigma2_b: np.ndarray
    mu_true: Optional[np.ndarray] = None
    conditions: List[str] = field(default_factory=lambda: [REFERENCE_CONDITION])
    category: str = "synthetic"

    def __post_init__(self):
        if self.V < 2 or self.n_subjects < 1 or self.P < 1:
            raise ConfigError("V must be >= 2, n_subjects >= 1 and P >= 1")
        self.Sigma_true = np.asarray(self.Sigma_true, dtype=float)
        self.D_true = np.asarray(self.D_true, dtype=float)
        self.e_true = np.asarray(self.e_true, dtype=float)
        self.sigma2_b = np.broadcast_to(np.asarray(self.sigma2_b, dtype=float), (self.P,)).copy()
        self.mu_true = np.zeros(self.V) if self.mu_true is None else np.broadcast_to(
            np.asarray(self.mu_true, dtype=float), (self.V,)).copy()
        expected = {"Sigma_true": (self.V + 1, self.V + 1), "D_true": (self.V, self.V), "e_true": (self.P,)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ConfigError(f"{name} must have shape {shape}, got {getattr(self, name).shape}")
        if self.sigma2_c < 0 or np.any(self.sigma2_b < 0):
            raise ConfigError("Noise variances must be non-negative")
        if not self.conditions:
            raise ConfigError("At least one condition is required")


@dataclass
class GroundTruth:
    """Latents and parameters behind a synthetic dataset"""
    subject_ids: List[str]
    Y: np.ndarray
    kappa: np.ndarray
    Sigma: np.ndarray
    mu: np.ndarray
    D: np.ndarray
    e: np.ndarray

    @property
    def cross_covariance(self) -> np.ndarray:
        V = self.D.shape[0]
        return self.Sigma[:V, V].copy()
