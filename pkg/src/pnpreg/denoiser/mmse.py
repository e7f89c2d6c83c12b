"""Closed-form MMSE denoiser for a Gaussian prior.

For ``phi ~ N(mean, cov)`` observed as ``z = phi + N(0, sigma^2 I)`` the
posterior mean is ``mean + cov (cov + sigma^2 I)^-1 (z - mean)`` and its
residual ``z - D(z)`` equals ``-sigma^2 grad log p_z(z)`` with
``p_z = N(mean, cov + sigma^2 I)``. Used to check the residual/score relation
where everything is available analytically.
"""

from __future__ import annotations

import numpy as np

MAX_DIM = 16


def _check_cov(cov: np.ndarray) -> np.ndarray:
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    n = cov.shape[0]
    if cov.shape != (n, n):
        raise ValueError("covariance must be square")
    if n > MAX_DIM:
        raise ValueError(f"dimension {n} exceeds {MAX_DIM}")
    scale = max(float(np.max(np.abs(cov))), 1.0)
    if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-12 * scale):
        raise ValueError("covariance is not symmetric")
    # a zero covariance is accepted as the degenerate (point-mass) limit
    if np.min(np.linalg.eigvalsh(cov)) < -1e-12 * scale:
        raise ValueError("covariance is not positive semi-definite")
    return cov


def mmse_gaussian_oracle(mean, cov, sigma: float, z):
    """Returns ``(E[phi | z], z - E[phi | z])``."""
    cov = _check_cov(cov)
    mean = np.asarray(mean, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    k = cov + sigma**2 * np.eye(cov.shape[0])
    denoised = mean + cov @ np.linalg.solve(k, z - mean)
    return denoised, z - denoised


def gaussian_marginal_logpdf(mean, cov, sigma: float, z) -> float:
    """``log p_z(z)`` for the Gaussian prior smoothed by the noise."""
    cov = _check_cov(cov)
    mean = np.asarray(mean, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    k = cov + sigma**2 * np.eye(cov.shape[0])
    sign, logdet = np.linalg.slogdet(k)
    if sign <= 0:
        raise ValueError("smoothed covariance is singular")
    d = z - mean
    return float(-0.5 * (d @ np.linalg.solve(k, d) + logdet + len(d) * np.log(2 * np.pi)))
