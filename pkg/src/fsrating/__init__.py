"""Experience rating with latent risk profiles: NB claim counts, GB2 claim sizes and a hidden Markov chain."""

from .distributions import (
    ModelParameters,
    ProfileFrequencyParams,
    ProfileSeverityParams,
    Representation,
    TransitionModel,
)
from .portfolio import CovariateSchema, Portfolio, load_portfolio, write_portfolio

__version__ = "0.1.0"

__all__ = [
    "ModelParameters",
    "ProfileFrequencyParams",
    "ProfileSeverityParams",
    "Representation",
    "TransitionModel",
    "CovariateSchema",
    "Portfolio",
    "load_portfolio",
    "write_portfolio",
    "__version__",
]
