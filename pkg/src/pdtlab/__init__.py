"""Contrastive dual-encoder pre-training for sequential recommendation on a small autodiff engine."""

__version__ = "0.1.0"

from .errors import (ConfigError, ContractError, DataError, DimensionError, FormatVersionError, IntegrityError,
                     NumericError, PdtError)

__all__ = [
    "__version__", "PdtError", "ContractError", "DimensionError", "ConfigError", "DataError", "NumericError",
    "IntegrityError", "FormatVersionError",
]
