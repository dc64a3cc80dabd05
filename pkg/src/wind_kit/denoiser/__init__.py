"""Clean-state predictors: the contract, a Gaussian oracle and a trainable network."""

from .base import Denoiser, DenoiserBase, Linearization, loss, score_from_denoiser
from .conv import Checkpoint, ConvDenoiser, NetConfig, UNetLite, load_checkpoint, save_checkpoint
from .gaussian import GaussianDenoiser, GaussianPrior, analytic_denoise
from .training import TrainConfig, TrainResult, WindowDataset, total_steps, train

__all__ = [
    "Checkpoint",
    "ConvDenoiser",
    "Denoiser",
    "DenoiserBase",
    "GaussianDenoiser",
    "GaussianPrior",
    "Linearization",
    "NetConfig",
    "TrainConfig",
    "TrainResult",
    "UNetLite",
    "WindowDataset",
    "analytic_denoise",
    "load_checkpoint",
    "loss",
    "save_checkpoint",
    "score_from_denoiser",
    "total_steps",
    "train",
]
