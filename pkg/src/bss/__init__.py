"""Finite-capacity bike-sharing network: simulation, mean-field and diffusion
limits, equilibria, and verification experiments."""

__version__ = "0.1.0"

from .model import (
    ArrivalModel,
    ChoiceSpec,
    ConvergenceError,
    FourierRateModel,
    SystemParams,
    ValidationError,
    arrival_rate,
    choice_weight,
    validate_params,
)

__all__ = [
    "ArrivalModel",
    "ChoiceSpec",
    "ConvergenceError",
    "FourierRateModel",
    "SystemParams",
    "ValidationError",
    "arrival_rate",
    "choice_weight",
    "validate_params",
    "__version__",
]
