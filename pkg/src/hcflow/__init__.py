"""Hierarchical conditional normalizing flow for super-resolution and rescaling."""

from .model import HCFlow, HCFlowConfig, LatentDecomposition
from .objective import LossWeights, gaussian_logp, nll, rescaling_loss, sample_latents, sr_loss

__version__ = "0.1.0"

__all__ = [
    "HCFlow", "HCFlowConfig", "LatentDecomposition", "LossWeights", "gaussian_logp",
    "nll", "rescaling_loss", "sample_latents", "sr_loss",
]
