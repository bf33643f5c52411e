"""
Shared fixtures: tiny hand-written datasets and small simulated studies
"""

import json
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.models import SamplerConfig
from src.simulation import default_params, simulate


def write_tiny_dataset(root: Path, matrices=None, scale="fisher_z", behaviors=None, atlas=None,
                       extra_manifest=None) -> Path:
    """
    Write a V=4 dataset with 2 subjects x 2 conditions

    Args:
        matrices: Optional {(subject, condition): 4x4 array} overriding the defaults
        behaviors: Optional DataFrame with a subject_id column
        atlas: Optional DataFrame node_id,network
    """
    root.mkdir(parents=True, exist_ok=True)
    (root / "conn").mkdir(exist_ok=True)
    rng = np.random.default_rng(0)
    atlas = atlas if atlas is not None else pd.DataFrame({
        "node_id": [1, 2, 3, 4],
        "network": ["Default Mode", "Motor", "Motor", "Visual I"],
    })
    atlas.to_csv(root / "atlas.csv", index=False)

    behaviors = behaviors if behaviors is not None else pd.DataFrame({
        "subject_id": ["s1", "s2"],
        "anxiety": [1.0, 3.0],
        "fear": [2.0, np.nan],
    })
    behaviors.to_csv(root / "mood.csv", index=False)

    entries = []
    for subject in ("s1", "s2"):
        for condition in ("Rest1", "SST"):
            key = (subject, condition)
            if matrices is not None and key in matrices:
                matrix = matrices[key]
            else:
                upper = np.triu(rng.uniform(-0.5, 0.5, size=(4, 4)), k=1)
                matrix = upper + upper.T
            path = f"conn/{subject}_{condition}.csv"
            pd.DataFrame(matrix).to_csv(root / path, header=False, index=False)
            entries.append({"subject": subject, "condition": condition, "path": path})

    manifest = {
        "version": 1,
        "V": 4,
        "scale": scale,
        "atlas": "atlas.csv",
        "behaviors": [{"category": "mood", "path": "mood.csv"}],
        "connectomes": entries,
    }
    manifest.update(extra_manifest or {})
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest))
    return path


@pytest.fixture
def tiny_manifest(tmp_path):
    return write_tiny_dataset(tmp_path / "tiny")


@pytest.fixture
def small_study():
    """12 subjects, 6 nodes, 2 indicators, two conditions"""
    params = default_params(V=6, n_subjects=12, P=2, cross=(0.5, -0.4), sigma2_c=0.1, sigma2_b=0.3,
                            conditions=("Rest1", "SST"), seed=3)
    return simulate(params, seed=3)


@pytest.fixture
def fast_config():
    return SamplerConfig(burn_in=10, samples=15, thin=1, chains=1, inits=1, seed=11)
