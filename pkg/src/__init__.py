"""
Connectome Behavior Prediction System
Joint latent-space model of functional connectomes and behavior with a Gibbs sampler
"""

__version__ = "1.0.0"
__author__ = "Connectome Prediction Team"

from .models import (
    Atlas,
    BehaviorPanel,
    Connectome,
    Dataset,
    SamplerConfig,
    CVConfig,
    RunConfig,
    PosteriorSummary
)

from .data_manager import DataManager, load_dataset
from .prediction_engine import PredictionEngine
from .sampler import fit_model, run_chain, posterior_summary

__all__ = [
    'Atlas',
    'BehaviorPanel',
    'Connectome',
    'Dataset',
    'SamplerConfig',
    'CVConfig',
    'RunConfig',
    'PosteriorSummary',
    'DataManager',
    'load_dataset',
    'PredictionEngine',
    'fit_model',
    'run_chain',
    'posterior_summary'
]
