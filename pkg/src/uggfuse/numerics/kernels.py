"""Gaussian building blocks shared by the node-level and sample-level heads."""

from __future__ import annotations

import numpy as np

from ..errors import ContractViolationError, DomainError
from .engine import Tensor, as_tensor, log, tmean
from .rng import RngStream


def _check_pair(mu, sigma):
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if mu.shape != sigma.shape:
        raise ContractViolationError(
            f"mu/sigma shape mismatch: {mu.shape} vs {sigma.shape}")
    if not (np.isfinite(mu).all() and np.isfinite(sigma).all()):
        raise DomainError("mu/sigma must be finite")
    return mu, sigma


def reparameterize(mu, sigma, rng: RngStream) -> np.ndarray:
    """Draw mu + eps * sigma with eps ~ N(0, I) from the given stream."""
    mu, sigma = _check_pair(mu, sigma)
    if (sigma < 0).any():
        raise DomainError("sigma must be non-negative")
    eps = rng.standard_normal(mu.shape)
    return mu + eps * sigma


def gaussian_kl(mu, sigma) -> float:
    """Mean KL(N(mu, diag sigma^2) || N(0, I)) over all entries.

    Elementwise 0.5 * (mu^2 + sigma^2 - log sigma^2 - 1), mean-reduced so the
    value is dimension-independent. Zero exactly at (mu, sigma) = (0, 1).
    """
    mu, sigma = _check_pair(mu, sigma)
    if (sigma <= 0).any():
        raise DomainError("sigma must be strictly positive for the KL")
    var = sigma * sigma
    return float(np.mean(0.5 * (mu * mu + var - np.log(var) - 1.0)))


def gaussian_kl_t(mu: Tensor, sigma: Tensor) -> Tensor:
    """Differentiable twin of gaussian_kl for graph-mode code paths."""
    mu, sigma = as_tensor(mu), as_tensor(sigma)
    var = sigma * sigma
    return tmean(0.5 * (mu * mu + var - log(var) - 1.0))
