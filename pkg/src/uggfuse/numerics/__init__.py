"""Numeric foundations: autodiff engine, counter RNG, Gaussian kernels."""

from . import engine
from .engine import Tensor, as_tensor, no_grad, parameter
from .gradcheck import GradReport, grad_check, relative_error
from .kernels import gaussian_kl, gaussian_kl_t, reparameterize
from .rng import RngStream, seeded_rng, stream_id_for

__all__ = [
    "engine",
    "Tensor",
    "as_tensor",
    "no_grad",
    "parameter",
    "GradReport",
    "grad_check",
    "relative_error",
    "gaussian_kl",
    "gaussian_kl_t",
    "reparameterize",
    "RngStream",
    "seeded_rng",
    "stream_id_for",
]
