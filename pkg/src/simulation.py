"""
Synthetic study generator
Draws connectomes and behaviors from the joint latent model and writes them as a loadable dataset
"""

import json
import logging
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .data_manager import average_condition
from .errors import ConfigError, ReportError
from .models import (
    AVERAGE_CONDITION,
    CANONICAL_NETWORKS,
    Atlas,
    AtlasEntry,
    BehaviorPanel,
    Connectome,
    Dataset,
    GenerativeParams,
    GroundTruth,
)
from .rng import STREAM_SIMULATE, make_rng

logger = logging.getLogger(__name__)


def build_sigma(V: int, cross: Union[Sequence[float], Dict[int, float]], node_var: float = 1.0,
                construct_var: float = 1.0) -> np.ndarray:
    """
    Latent covariance with an isotropic node block and a sparse cross block

    Args:
        V: Number of nodes
        cross: Node-construct covariances, either a sequence assigned to nodes 1..k
            or a mapping node_id -> covariance
        node_var: Variance of every node latent
        construct_var: Variance of the construct

    Returns:
        (V+1) x (V+1) positive-definite matrix

    Raises:
        ConfigError: When the result is not positive definite
    """
    if not isinstance(cross, dict):
        cross = {node: value for node, value in enumerate(cross, start=1)}
    Sigma = np.zeros((V + 1, V + 1))
    Sigma[:V, :V] = node_var * np.eye(V)
    Sigma[V, V] = construct_var
    for node, value in cross.items():
        if not 1 <= node <= V:
            raise ConfigError(f"Signal node {node} outside 1..{V}")
        Sigma[node - 1, V] = Sigma[V, node - 1] = value
    check_positive_definite(Sigma)
    return Sigma


def check_positive_definite(Sigma: np.ndarray):
    if not np.allclose(Sigma, Sigma.T):
        raise ConfigError("Latent covariance is not symmetric")
    try:
        np.linalg.cholesky(Sigma)
    except np.linalg.LinAlgError:
        smallest = float(np.linalg.eigvalsh(Sigma)[0])
        raise ConfigError(
            f"Latent covariance is not positive definite (smallest eigenvalue {smallest:.4g}); "
            f"reduce the cross-covariances or raise the node variance"
        ) from None


def synthetic_atlas(V: int) -> Atlas:
    """Contiguous blocks of nodes over the canonical networks, in canonical order"""
    n_networks = len(CANONICAL_NETWORKS)
    return Atlas([
        AtlasEntry(node_id=v, network=CANONICAL_NETWORKS[(v - 1) * n_networks // V])
        for v in range(1, V + 1)
    ])


def simulate(params: GenerativeParams, seed: int) -> Tuple[Dataset, GroundTruth]:
    """
    Draw a synthetic dataset from the generative equations

    Latents (y_j, kappa_j) ~ N((mu, 0), Sigma) are shared across conditions;
    connectome noise is drawn independently per condition. An "Average"
    condition in ``params.conditions`` is computed from the others.

    Args:
        params: Generative parameters
        seed: Seed of the simulation stream

    Returns:
        (dataset, ground truth)
    """
    check_positive_definite(params.Sigma_true)
    rng = make_rng(seed, STREAM_SIMULATE)
    V, n, P = params.V, params.n_subjects, params.P
    width = max(3, len(str(n)))
    subject_ids = [f"sub{j:0{width}d}" for j in range(1, n + 1)]

    mean = np.append(params.mu_true, 0.0)
    Z = rng.multivariate_normal(mean, params.Sigma_true, size=n, method="cholesky")
    Y, kappa = Z[:, :V], Z[:, V]

    D = (params.D_true + params.D_true.T) / 2
    np.fill_diagonal(D, 0.0)
    iu = np.triu_indices(V, k=1)
    drawn = [c for c in params.conditions if c != AVERAGE_CONDITION]
    connectomes = {}
    for condition in drawn:
        for j, subject in enumerate(subject_ids):
            matrix = D + np.outer(Y[j], Y[j])
            noise = np.zeros((V, V))
            noise[iu] = rng.normal(0.0, np.sqrt(params.sigma2_c), size=len(iu[0]))
            matrix = matrix + noise + noise.T
            np.fill_diagonal(matrix, 0.0)
            connectomes[(subject, condition)] = Connectome(subject, condition, matrix)

    noise = rng.normal(size=(n, P)) * np.sqrt(params.sigma2_b)
    values = params.e_true + kappa[:, None] + noise
    panel = BehaviorPanel(
        category=params.category,
        subject_ids=subject_ids,
        indicators=[f"indicator{p}" for p in range(1, P + 1)],
        values=values,
    )
    dataset = Dataset(V=V, conditions=list(drawn), connectomes=connectomes,
                      behaviors={params.category: panel}, atlas=synthetic_atlas(V))
    if AVERAGE_CONDITION in params.conditions:
        for subject, connectome in average_condition(dataset, drawn).items():
            connectomes[(subject, AVERAGE_CONDITION)] = connectome
        dataset.conditions.append(AVERAGE_CONDITION)

    truth = GroundTruth(subject_ids=subject_ids, Y=Y, kappa=kappa, Sigma=params.Sigma_true.copy(),
                        mu=params.mu_true.copy(), D=D, e=params.e_true.copy())
    logger.info(
        f"Simulated {n} subjects x {len(dataset.conditions)} conditions (V={V}, P={P}, seed {seed})"
    )
    return dataset, truth


def default_params(V: int = 30, n_subjects: int = 80, P: int = 4,
                   cross: Sequence[float] = (0.4, -0.4, 0.3, -0.3, 0.2, -0.2),
                   cross_scale: float = 1.0, node_var: float = 1.0, latent_mean: float = 1.5,
                   sigma2_c: float = 0.25, sigma2_b: float = 0.5,
                   conditions: Sequence[str] = ("Rest1",), seed: int = 0) -> GenerativeParams:
    """Generative parameters used by the command line and the desk-scale checks"""
    Sigma = build_sigma(V, [value * cross_scale for value in cross], node_var=node_var)
    rng = make_rng(seed, STREAM_SIMULATE, 1)
    D = np.zeros((V, V))
    D[np.triu_indices(V, k=1)] = rng.normal(0.0, 0.1, size=V * (V - 1) // 2)
    return GenerativeParams(
        V=V, n_subjects=n_subjects, P=P, Sigma_true=Sigma, D_true=D + D.T,
        e_true=np.zeros(P), sigma2_c=sigma2_c, sigma2_b=np.full(P, sigma2_b),
        mu_true=np.full(V, latent_mean), conditions=list(conditions),
    )


def write_synthetic_dataset(dataset: Dataset, truth: Optional[GroundTruth], out_dir: Union[str, Path]) -> Path:
    """
    Write a dataset as manifest + CSVs, plus ground-truth tables

    Layout: manifest.json, atlas.csv, behaviors/<category>.csv,
    connectomes/<subject>__<condition>.csv, truth/{node_covariance,latents,sigma}.csv

    Returns:
        Path of the manifest
    """
    out = Path(out_dir)
    try:
        (out / "behaviors").mkdir(parents=True, exist_ok=True)
        (out / "connectomes").mkdir(parents=True, exist_ok=True)

        atlas_frame = pd.DataFrame({
            "node_id": dataset.atlas.node_ids,
            "network": dataset.atlas.networks(),
        })
        atlas_frame.to_csv(out / "atlas.csv", index=False)

        behaviors = []
        for category, panel in sorted(dataset.behaviors.items()):
            relative = f"behaviors/{category}.csv"
            panel.to_frame().to_csv(out / relative, index=False)
            behaviors.append({"category": category, "path": relative})

        drawn = [c for c in dataset.conditions if c != AVERAGE_CONDITION]
        connectomes = []
        for (subject, condition), connectome in sorted(dataset.connectomes.items()):
            if condition == AVERAGE_CONDITION:
                continue
            relative = f"connectomes/{subject}__{condition}.csv"
            pd.DataFrame(connectome.matrix).to_csv(out / relative, header=False, index=False)
            connectomes.append({"subject": subject, "condition": condition, "path": relative})

        manifest = {
            "version": 1,
            "V": dataset.V,
            "scale": "fisher_z",
            "atlas": "atlas.csv",
            "behaviors": behaviors,
            "connectomes": connectomes,
        }
        if AVERAGE_CONDITION in dataset.conditions:
            manifest["average_of"] = drawn
        manifest_path = out / "manifest.json"
        with open(manifest_path, "w", encoding="utf-8") as file:
            json.dump(manifest, file, indent=2)

        if truth is not None:
            write_ground_truth(truth, out / "truth")
    except OSError as e:
        raise ReportError(f"Could not write synthetic dataset to {out}: {e}") from e

    logger.info(f"Wrote {len(connectomes)} connectome files and manifest to {out}")
    return manifest_path


def write_ground_truth(truth: GroundTruth, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    V = truth.D.shape[0]
    pd.DataFrame({
        "node_id": np.arange(1, V + 1),
        "true_cov": truth.cross_covariance,
        "mu": truth.mu,
    }).to_csv(out_dir / "node_covariance.csv", index=False)

    latents = pd.DataFrame(truth.Y, columns=[f"y{v}" for v in range(1, V + 1)])
    latents.insert(0, "subject_id", truth.subject_ids)
    latents["kappa"] = truth.kappa
    latents.to_csv(out_dir / "latents.csv", index=False)
    pd.DataFrame(truth.Sigma).to_csv(out_dir / "sigma.csv", header=False, index=False)


def load_true_covariance(path: Union[str, Path]) -> np.ndarray:
    """True node-construct covariances from a truth/node_covariance.csv file"""
    frame = pd.read_csv(path).sort_values("node_id")
    return frame["true_cov"].to_numpy(dtype=float)
