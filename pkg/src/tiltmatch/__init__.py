"""Discrete tilt matching for masked diffusion models.

Reward-tilted fine-tuning of unmasking posteriors through a weighted
cross-entropy with a control variate, annealed over tilt levels, with exact
enumeration oracles for small state spaces and a grid-maze testbed.
"""
__version__ = "0.1.0"

from .core import ContractError, Schedule, Vocabulary, hazard
from .model import NeuralConfig, NeuralModel, TabularModel, load_checkpoint, save_checkpoint
from .objective import DtmConfig, cdtm_loss_and_grad, exact_cdtm_loss, sar_cdtm_loss_and_grad, tc_target
from .oracle import ExactDistribution, esscher_posterior, exact_posterior, path_kl, tilt
from .trainer import BufferConfig, RolloutConfig, run_dtm, run_dtm_exact

__all__ = [
    "BufferConfig", "ContractError", "DtmConfig", "ExactDistribution", "NeuralConfig",
    "NeuralModel", "RolloutConfig", "Schedule", "TabularModel", "Vocabulary",
    "cdtm_loss_and_grad", "esscher_posterior", "exact_cdtm_loss", "exact_posterior",
    "hazard", "load_checkpoint", "path_kl", "run_dtm", "run_dtm_exact",
    "sar_cdtm_loss_and_grad", "save_checkpoint", "tc_target", "tilt",
]
