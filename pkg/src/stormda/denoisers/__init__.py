"""Denoisers: closed-form Gaussian references and the learned attention model."""
from .base import ContextArrays, Denoiser, denoiser_vjp
from .gaussian import DenseGaussianDenoiser, GaussianDenoiser, SpectralGaussianDenoiser
from .storm import StormConfig, StormDenoiser, init_params

__all__ = ["ContextArrays", "Denoiser", "denoiser_vjp", "DenseGaussianDenoiser", "GaussianDenoiser",
           "SpectralGaussianDenoiser", "StormConfig", "StormDenoiser", "init_params"]
