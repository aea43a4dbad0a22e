"""Stochastic operator networks: DeepONet with an SDE branch trained by adjoint BSDE gradients."""

from .errors import (ConfigError, ContractError, DimensionError, DivergenceError, DomainError,
                     NumericError, SonError)

__version__ = "0.1.0"

__all__ = ["ConfigError", "ContractError", "DimensionError", "DivergenceError", "DomainError",
           "NumericError", "SonError", "__version__"]
