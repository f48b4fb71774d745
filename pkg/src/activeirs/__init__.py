"""Rate analysis and optimization for active-IRS aided MIMO links.

Deterministic approximation of the ergodic rate under Kronecker-correlated
Rayleigh fading, a Monte-Carlo reference, and an alternating optimizer over
the transmit covariance and the surface reflection coefficients.
"""

__version__ = "0.1.0"

from .channel import (
    ChannelRealization,
    CorrelationSpec,
    ReflectionParams,
    SystemConfig,
    build_config,
    correlation_matrix,
    effective_correlations,
    sample_channel,
)
from .deterministic import DaRate, da_rate, passive_da_rate, solve_alpha, solve_delta
from .errors import (
    AccuracyError,
    ContractError,
    ConvergenceError,
    DegenerateError,
    InfeasibleBudgetError,
    NotPSDError,
)
from .montecarlo import RateReport, ergodic_rate_mc, instantaneous_rate
from .optimizer import (
    AoTrace,
    ao_optimize,
    gradient_amplitude,
    gradient_theta,
    line_search,
    project_feasible,
    water_fill,
)

__all__ = [
    "AccuracyError", "AoTrace", "ChannelRealization", "ContractError", "ConvergenceError",
    "CorrelationSpec", "DaRate", "DegenerateError", "InfeasibleBudgetError", "NotPSDError",
    "RateReport", "ReflectionParams", "SystemConfig", "ao_optimize", "build_config",
    "correlation_matrix", "da_rate", "effective_correlations", "ergodic_rate_mc",
    "gradient_amplitude", "gradient_theta", "instantaneous_rate", "line_search",
    "passive_da_rate", "project_feasible", "sample_channel", "solve_alpha", "solve_delta",
    "water_fill",
]
