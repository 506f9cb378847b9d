"""Temporal Fusion Transformer on a small numpy autodiff engine."""

__version__ = "0.1.0"

from .errors import ConfigError, ContractError, DataError, DimensionError, NumericError, TFTError
from .model import Ablations, Batch, ForecastOutput, TFTConfig, TFTModel, apply_ablation

__all__ = [
    "Ablations",
    "Batch",
    "ConfigError",
    "ContractError",
    "DataError",
    "DimensionError",
    "ForecastOutput",
    "NumericError",
    "TFTConfig",
    "TFTError",
    "TFTModel",
    "apply_ablation",
]
