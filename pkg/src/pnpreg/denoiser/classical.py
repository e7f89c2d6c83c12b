"""Training-free denoisers for displacement fields."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from ..grid import as_field
from ..metrics import _forward_diff_adjoint


def _grad(x: np.ndarray) -> np.ndarray:
    """Forward differences along every spatial axis, zero at the far end."""
    ndim = x.ndim - 1
    out = np.zeros((ndim,) + x.shape)
    for a in range(ndim):
        d = np.diff(x, axis=a)
        idx = [slice(None)] * x.ndim
        idx[a] = slice(0, x.shape[a] - 1)
        out[a][tuple(idx)] = d
    return out


def _grad_adjoint(p: np.ndarray) -> np.ndarray:
    ndim = p.shape[0]
    out = np.zeros(p.shape[1:])
    for a in range(ndim):
        n = p.shape[1 + a]
        if n < 2:
            continue
        out += _forward_diff_adjoint(np.take(p[a], np.arange(n - 1), axis=a), a)
    return out


def tv_prox(z, weight: float, iters: int = 100) -> np.ndarray:
    """``argmin_x 0.5 ||x - z||^2 + weight * TV(x)`` for each channel.

    TV is isotropic over the spatial axes and separate per channel. Solved on
    the dual with Beck-Teboulle's fast gradient projection for a fixed number
    of iterations.
    """
    z = np.asarray(z, dtype=np.float64)
    if weight <= 0:
        raise ValueError("TV weight must be positive")
    ndim = z.ndim - 1
    step = 1.0 / (weight * 4.0 * ndim)
    p = np.zeros((ndim,) + z.shape)
    q = p
    t = 1.0
    for _ in range(iters):
        x = z - weight * _grad_adjoint(q)
        p_new = q + step * _grad(x)
        p_new /= np.maximum(1.0, np.sqrt(np.sum(p_new * p_new, axis=0)))
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        q = p_new + ((t - 1.0) / t_new) * (p_new - p)
        p, t = p_new, t_new
    return z - weight * _grad_adjoint(p)


@dataclass(frozen=True)
class TVDenoiser:
    weight: float
    iters: int = 100

    def __post_init__(self):
        if not self.weight > 0:
            raise ValueError("TV weight must be positive")
        if self.iters < 1:
            raise ValueError("iters must be >= 1")

    def __call__(self, z) -> np.ndarray:
        return tv_prox(as_field(z), self.weight, self.iters)


@dataclass(frozen=True)
class GaussianDenoiser:
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("blur sigma must be positive")

    def __call__(self, z) -> np.ndarray:
        z = as_field(z)
        out = np.empty_like(z)
        for c in range(z.shape[-1]):
            out[..., c] = gaussian_filter(z[..., c], self.sigma, mode="nearest")
        return out
