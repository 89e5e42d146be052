"""Deep latent variable imputation for data missing not at random."""

__version__ = "0.1.0"

from .datagen import DataTable, load_csv, standardize
from .estimator import IMIWAEImputer
from .exceptions import (AggregationError, CalibrationError, ConfigError, DomainError, IMIWAEError,
                         NumericError, ParseError, ShapeError, SpecError, TrainingError)
from .imputer import ImputeConfig, generate, impute
from .model import ModelConfig, ModelParams
from .trainer import TrainConfig, train

__all__ = [
    "__version__", "DataTable", "load_csv", "standardize", "IMIWAEImputer", "ImputeConfig",
    "generate", "impute", "ModelConfig", "ModelParams", "TrainConfig", "train",
    "AggregationError", "CalibrationError", "ConfigError", "DomainError", "IMIWAEError",
    "NumericError", "ParseError", "ShapeError", "SpecError", "TrainingError",
]
