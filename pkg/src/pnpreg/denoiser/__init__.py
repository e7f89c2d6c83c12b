"""Denoisers usable as priors on displacement fields."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .classical import GaussianDenoiser, TVDenoiser, tv_prox
from .convnet import (
    ConvNetDenoiser,
    ConvNetParams,
    convnet_backward,
    convnet_forward,
    convnet_input_gradient,
    convnet_param_gradient,
    init_convnet,
)
from .mmse import gaussian_marginal_logpdf, mmse_gaussian_oracle
from .selection import select_denoiser
from .training import (
    DenoiserTrainingConfig,
    NoisyFieldSample,
    TrainingDivergedError,
    TrainingResult,
    denoising_mse,
    train_denoiser,
)


def denoise(denoiser, z):
    """Apply any denoiser (TV, Gaussian or ConvNet) to a field."""
    return denoiser(z)


__all__ = [
    "CheckpointError", "ConvNetDenoiser", "ConvNetParams", "DenoiserTrainingConfig",
    "GaussianDenoiser", "NoisyFieldSample", "TVDenoiser", "TrainingDivergedError",
    "TrainingResult", "convnet_backward", "convnet_forward", "convnet_input_gradient",
    "convnet_param_gradient", "denoise", "denoising_mse", "gaussian_marginal_logpdf",
    "init_convnet", "load_checkpoint", "mmse_gaussian_oracle", "save_checkpoint",
    "select_denoiser", "train_denoiser", "tv_prox",
]
