"""Desk-scale simulator of federated preference alignment with a mixture of client reward models."""

from .numerics import ContractError, TrainingDiverged

__version__ = "0.1.0"
__all__ = ["ContractError", "TrainingDiverged", "__version__"]
