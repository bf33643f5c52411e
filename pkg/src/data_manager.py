"""
Data Manager for manifest- and CSV-based dataset loading
Handles loading, validation and transformation of connectomes, behavior panels and the atlas
"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .errors import DataValidationError, DomainError
from .models import (
    AVERAGE_CONDITION,
    Atlas,
    AtlasEntry,
    BehaviorPanel,
    Connectome,
    Dataset,
)

logger = logging.getLogger(__name__)

ASYMMETRY_TOLERANCE = 1e-6
SCALES = ("pearson", "fisher_z")


def fisher_z(r: Union[float, np.ndarray], source: str = "") -> Union[float, np.ndarray]:
    """
    Fisher z-transformation (arctanh) of correlations

    Args:
        r: Correlation value or array of values in (-1, 1)
        source: Description of where the values came from, used in error messages

    Returns:
        arctanh(r), with the input's shape
    """
    values = np.asarray(r, dtype=float)
    bad = ~(np.abs(values) < 1)
    if np.any(bad):
        if values.ndim == 0:
            raise DomainError(f"Correlation {float(values)} outside (-1, 1){_where(source)}")
        cell = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DomainError(
            f"Correlation {values[cell]} at cell {cell} outside (-1, 1){_where(source)}"
        )
    z = np.arctanh(values)
    return float(z) if values.ndim == 0 else z


def _where(source: str) -> str:
    return f" in {source}" if source else ""


def standardize_behaviors(panel: BehaviorPanel, subject_ids: Optional[Sequence[str]] = None) -> BehaviorPanel:
    """
    Column-wise z-scoring over non-missing entries

    Args:
        panel: Behavior panel, raw or already standardized
        subject_ids: Rows whose non-missing values define mean and sd (defaults to all rows)

    Returns:
        Standardized panel whose scaling maps back to the original raw units
    """
    values = panel.values
    reference = values if subject_ids is None else panel.rows(list(subject_ids))
    means = np.empty(panel.P)
    sds = np.empty(panel.P)
    for p, name in enumerate(panel.indicators):
        column = reference[:, p]
        observed = column[~np.isnan(column)]
        if np.unique(observed).size < 2:
            raise DataValidationError(
                f"Indicator '{name}' in category '{panel.category}' needs at least 2 distinct "
                f"non-missing values to standardize"
            )
        means[p] = observed.mean()
        sds[p] = observed.std(ddof=1)

    standardized = (values - means) / sds
    if panel.scaling is None:
        scaling = {name: (float(means[p]), float(sds[p])) for p, name in enumerate(panel.indicators)}
    else:
        scaling = {}
        for p, name in enumerate(panel.indicators):
            old_mean, old_sd = panel.scaling[name]
            scaling[name] = (float(old_mean + old_sd * means[p]), float(old_sd * sds[p]))
    return BehaviorPanel(
        category=panel.category,
        subject_ids=list(panel.subject_ids),
        indicators=list(panel.indicators),
        values=standardized,
        scaling=scaling,
    )


def average_condition(dataset: Dataset, source_conditions: Sequence[str]) -> Dict[str, Connectome]:
    """
    Elementwise mean of each subject's Fisher-z matrices across source conditions

    Returns:
        Mapping subject_id -> Connectome labeled "Average"
    """
    if not source_conditions:
        raise DataValidationError("average_condition needs at least one source condition")
    subjects = sorted({s for s, c in dataset.connectomes if c in source_conditions})
    averaged = {}
    for subject in subjects:
        matrices = []
        for condition in source_conditions:
            if (subject, condition) not in dataset.connectomes:
                raise DataValidationError(
                    f"Subject {subject} is missing condition {condition} required for the average"
                )
            matrices.append(dataset.connectomes[(subject, condition)].matrix)
        averaged[subject] = Connectome(subject, AVERAGE_CONDITION, np.mean(matrices, axis=0))
    logger.info(f"Averaged {len(source_conditions)} conditions for {len(averaged)} subjects")
    return averaged


def edge_vector(matrix: np.ndarray) -> np.ndarray:
    """Upper-triangle edges (row-major, diagonal excluded)"""
    rows, cols = np.triu_indices(matrix.shape[0], k=1)
    return matrix[rows, cols]


def edge_matrix(dataset: Dataset, condition: str, subject_ids: Sequence[str]) -> np.ndarray:
    """Edge vectors of several subjects stacked as (n, V(V-1)/2)"""
    return np.stack([edge_vector(dataset.connectome(s, condition).matrix) for s in subject_ids])


def clean_matrix(matrix: np.ndarray, V: int, scale: str, source: str) -> np.ndarray:
    """
    Validate one raw matrix and bring it to the stored form

    Checks shape and NaN cells, symmetrizes small asymmetries, zeroes the
    diagonal and Fisher-transforms Pearson inputs.
    """
    if matrix.shape != (V, V):
        raise DataValidationError(f"{source} has shape {matrix.shape}, expected ({V}, {V})")
    off_diagonal = ~np.eye(V, dtype=bool)
    if np.any(~np.isfinite(matrix[off_diagonal])):
        cell = tuple(int(i) for i in np.argwhere(~np.isfinite(matrix) & off_diagonal)[0])
        raise DataValidationError(f"{source} has a NaN or infinite cell at {cell}")
    asymmetry = float(np.max(np.abs(matrix - matrix.T))) if V else 0.0
    if asymmetry > ASYMMETRY_TOLERANCE:
        raise DataValidationError(
            f"{source} is asymmetric (max |M - M^T| = {asymmetry:.3g} > {ASYMMETRY_TOLERANCE})"
        )
    cleaned = np.where(off_diagonal, matrix, 0.0)
    cleaned = (cleaned + cleaned.T) / 2.0
    if scale == "pearson":
        cleaned = fisher_z(cleaned, source)
    np.fill_diagonal(cleaned, 0.0)
    return cleaned


def load_atlas(path: Path) -> Atlas:
    """Load an atlas CSV with header node_id,network[,hemisphere,x,y,z]"""
    frame = _read_csv(path, dtype={"network": str})
    for column in ("node_id", "network"):
        if column not in frame.columns:
            raise DataValidationError(f"Atlas file {path} lacks column '{column}'")
    has_coords = all(axis in frame.columns for axis in ("x", "y", "z"))
    entries = []
    for row in frame.itertuples(index=False):
        hemisphere = getattr(row, "hemisphere", None) if "hemisphere" in frame.columns else None
        coords = None
        if has_coords and not any(pd.isna(getattr(row, axis)) for axis in ("x", "y", "z")):
            coords = (float(row.x), float(row.y), float(row.z))
        entries.append(AtlasEntry(
            node_id=int(row.node_id),
            network=str(row.network),
            hemisphere=None if hemisphere is None or pd.isna(hemisphere) else str(hemisphere),
            coords=coords,
        ))
    return Atlas(entries)


def load_behavior_panel(path: Path, category: str) -> BehaviorPanel:
    """Load a behavior CSV with header subject_id,<indicator>...; empty cells are missing"""
    frame = _read_csv(path, dtype={"subject_id": str})
    if frame.columns.empty or frame.columns[0] != "subject_id":
        raise DataValidationError(f"Behavior file {path} must start with a subject_id column")
    if frame["subject_id"].duplicated().any():
        duplicate = frame.loc[frame["subject_id"].duplicated(), "subject_id"].iloc[0]
        raise DataValidationError(f"Behavior file {path} lists subject {duplicate} twice")
    indicators = [str(column) for column in frame.columns[1:]]
    if not indicators:
        raise DataValidationError(f"Behavior file {path} has no indicator columns")
    try:
        values = frame[indicators].apply(pd.to_numeric, errors="raise").to_numpy(dtype=float)
    except (ValueError, TypeError) as e:
        raise DataValidationError(f"Behavior file {path} has a non-numeric cell: {e}") from e
    return BehaviorPanel(
        category=category,
        subject_ids=frame["subject_id"].tolist(),
        indicators=indicators,
        values=values,
    )


def load_connectome_matrix(path: Path) -> np.ndarray:
    """Load a headerless V x V CSV of decimal floats"""
    frame = _read_csv(path, header=None)
    try:
        return frame.apply(pd.to_numeric, errors="raise").to_numpy(dtype=float)
    except (ValueError, TypeError) as e:
        raise DataValidationError(f"Connectome file {path} has a non-numeric cell: {e}") from e


def _read_csv(path: Path, **kwargs) -> pd.DataFrame:
    if not path.exists():
        raise DataValidationError(f"File not found: {path}")
    try:
        return pd.read_csv(path, float_precision="round_trip", **kwargs)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise DataValidationError(f"Could not parse {path}: {e}") from e


def load_dataset(manifest_path: Union[str, Path]) -> Dataset:
    """
    Load and validate a dataset described by a JSON manifest

    Paths inside the manifest are resolved relative to the manifest's directory.

    Args:
        manifest_path: Path to the manifest JSON

    Returns:
        Fully validated Dataset
    """
    return DataManager(manifest_path).dataset


class DataManager:
    """Loads a dataset from its manifest and serves views of it"""

    def __init__(self, manifest_path: Union[str, Path]):
        self.manifest_path = Path(manifest_path)
        self.input_files: List[Path] = []
        self.manifest: Dict = {}
        self.dataset = self.load_all_data()

    def _resolve(self, relative: str) -> Path:
        path = Path(relative)
        resolved = path if path.is_absolute() else self.manifest_path.parent / path
        self.input_files.append(resolved)
        return resolved

    def load_manifest(self) -> Dict:
        """Read and validate the manifest JSON"""
        if not self.manifest_path.exists():
            raise DataValidationError(f"Manifest not found: {self.manifest_path}")
        self.input_files.append(self.manifest_path)
        try:
            with open(self.manifest_path, "r", encoding="utf-8") as file:
                manifest = json.load(file)
        except json.JSONDecodeError as e:
            raise DataValidationError(f"Manifest {self.manifest_path} is not valid JSON: {e}") from e

        for key in ("version", "V", "scale", "atlas", "behaviors", "connectomes"):
            if key not in manifest:
                raise DataValidationError(f"Manifest {self.manifest_path} lacks key '{key}'")
        if manifest["scale"] not in SCALES:
            raise DataValidationError(f"Manifest scale must be one of {SCALES}, got {manifest['scale']}")
        if not isinstance(manifest["V"], int) or manifest["V"] < 2:
            raise DataValidationError(f"Manifest V must be an integer >= 2, got {manifest['V']}")
        return manifest

    def load_all_data(self) -> Dataset:
        """Load atlas, behavior panels and connectomes"""
        self.manifest = self.load_manifest()
        V = self.manifest["V"]
        scale = self.manifest["scale"]

        atlas = load_atlas(self._resolve(self.manifest["atlas"]))
        if atlas.V != V:
            raise DataValidationError(f"Atlas has {atlas.V} nodes but manifest declares V={V}")
        logger.info(f"Loaded atlas with {atlas.V} nodes")

        behaviors = {}
        for entry in self.manifest["behaviors"]:
            category = entry["category"]
            if category in behaviors:
                raise DataValidationError(f"Behavior category '{category}' listed twice")
            behaviors[category] = load_behavior_panel(self._resolve(entry["path"]), category)
            logger.info(
                f"Loaded category '{category}': {len(behaviors[category].subject_ids)} subjects, "
                f"{behaviors[category].P} indicators"
            )

        connectomes: Dict[Tuple[str, str], Connectome] = {}
        conditions: List[str] = []
        for entry in self.manifest["connectomes"]:
            subject, condition = str(entry["subject"]), str(entry["condition"])
            key = (subject, condition)
            if key in connectomes:
                raise DataValidationError(f"Connectome for {key} listed twice")
            path = self._resolve(entry["path"])
            matrix = clean_matrix(load_connectome_matrix(path), V, scale, f"connectome {path}")
            connectomes[key] = Connectome(subject, condition, matrix)
            if condition not in conditions:
                conditions.append(condition)
        logger.info(f"Loaded {len(connectomes)} connectomes over {len(conditions)} conditions")

        dataset = Dataset(V=V, conditions=conditions, connectomes=connectomes,
                          behaviors=behaviors, atlas=atlas)

        sources = self.manifest.get("average_of")
        if sources:
            for subject, connectome in average_condition(dataset, sources).items():
                connectomes[(subject, AVERAGE_CONDITION)] = connectome
            if AVERAGE_CONDITION not in conditions:
                conditions.append(AVERAGE_CONDITION)

        self._warn_uncovered_subjects(dataset)
        return dataset

    def _warn_uncovered_subjects(self, dataset: Dataset):
        for category, panel in dataset.behaviors.items():
            for condition in dataset.conditions:
                available = set(dataset.subjects_for(condition))
                missing = [s for s in panel.subject_ids if s not in available]
                if missing:
                    logger.warning(
                        f"{len(missing)} subjects of '{category}' have no {condition} connectome "
                        f"(first: {missing[0]})"
                    )

    def get_connectomes(self, condition: str, subject_ids: Sequence[str]) -> np.ndarray:
        """Get the (n, V, V) connectome stack for a condition"""
        return self.dataset.stack(condition, list(subject_ids))

    def get_panel(self, category: str) -> BehaviorPanel:
        """Get the raw behavior panel of a category"""
        return self.dataset.panel(category)

    def get_summary_stats(self) -> Dict:
        """Get summary statistics"""
        return {
            "V": self.dataset.V,
            "total_subjects": len(self.dataset.subjects),
            "total_connectomes": len(self.dataset.connectomes),
            "conditions": list(self.dataset.conditions),
            "categories": sorted(self.dataset.behaviors),
            "missing_behaviors": {category: int(np.isnan(self.get_panel(category).values).sum())
                                  for category in sorted(self.dataset.behaviors)},
            "input_files": len(self.input_files),
        }


def run_subjects(dataset: Dataset, condition: str, category: str) -> List[str]:
    """
    Subjects of a (condition, category) fit

    Every subject of the behavior panel must have a connectome under the condition.
    """
    if condition not in dataset.conditions:
        raise DataValidationError(f"Condition {condition} is not in the dataset")
    panel = dataset.panel(category)
    for subject in panel.subject_ids:
        if (subject, condition) not in dataset.connectomes:
            raise DataValidationError(
                f"Subject {subject} of category '{category}' lacks a {condition} connectome"
            )
    return sorted(panel.subject_ids)
