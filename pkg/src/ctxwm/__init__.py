"""Contextual latent world models with discrete codes for offline meta-RL."""

from .errors import (
    ConfigError,
    ContractError,
    CtxwmError,
    DimensionError,
    EmptyDatasetError,
    FormatError,
    NumericError,
    RegistryError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "CtxwmError",
    "DimensionError",
    "EmptyDatasetError",
    "FormatError",
    "NumericError",
    "RegistryError",
]
