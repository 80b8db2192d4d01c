"""Simulation and fluid analysis of token-based pull dispatching in the supermarket model."""

from .core import (
    OccupancyVector,
    ParameterError,
    Regime,
    RegimeKind,
    Schedule,
    SystemParams,
    total_mass,
    validate_params,
    weighted_norm,
)

__version__ = "0.1.0"
