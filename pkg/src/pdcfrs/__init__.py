"""Federated neural collaborative filtering with privacy-preserving data contribution."""

from .config import ExperimentConfig, load_config
from .data import InteractionDataset, RawRating, build_dataset, parse_ratings
from .model import LossConfig, ModelParams, init_params, predict_score
from .privacy import PrivacyConfig, SimilarityModel, perturb_user_set
from .federated import run_experiment

__version__ = "0.1.0"
