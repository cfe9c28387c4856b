"""Click model with attention and satisfaction for evaluating heterogeneous result pages."""

from .types import (
    CasParams,
    ConfigurationError,
    ItemType,
    ModelVariant,
    RatingHistogram,
    SerpItem,
    Session,
    SessionFormatError,
    VARIANT_PRESETS,
    read_sessions,
    write_sessions,
)
from .features import FeatureNormalization, extract_features, fit_normalization
from .model import CasModel, metric_utility, predict_session
from .training import FitResult, TrainConfig, fit, session_loglik, total_objective
from .evaluation import evaluate_models, pearson, spearman, tq_fold
from .simulator import SimConfig, simulate, simulate_with_truth

__version__ = "0.1.0"

__all__ = [
    "CasModel",
    "CasParams",
    "ConfigurationError",
    "FeatureNormalization",
    "FitResult",
    "ItemType",
    "ModelVariant",
    "RatingHistogram",
    "SerpItem",
    "Session",
    "SessionFormatError",
    "SimConfig",
    "TrainConfig",
    "VARIANT_PRESETS",
    "evaluate_models",
    "extract_features",
    "fit",
    "fit_normalization",
    "metric_utility",
    "pearson",
    "predict_session",
    "read_sessions",
    "session_loglik",
    "simulate",
    "simulate_with_truth",
    "spearman",
    "total_objective",
    "tq_fold",
    "write_sessions",
]
