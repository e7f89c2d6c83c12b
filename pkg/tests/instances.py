"""Small registration problems shared by the equilibrium tests and the acceptance suite."""

import numpy as np

from pnpreg.data import make_smooth_field, seed_seq
from pnpreg.deq import DeqConfig
from pnpreg.denoiser import ConvNetParams
from pnpreg.pirate import PirateConfig

TINY_DIMS = (16, 16)


def sinusoid_pair(seed, n=16, wavelength=12.0):
    """Sum of three plane waves, shifted by a smooth field: ``f(x) = g(x + s(x))``, ``m = g``.

    Band-limited images keep the warp smooth enough for the fixed-point solve
    to converge to high accuracy on a 16x16 grid.
    """
    rng = np.random.default_rng(seed)
    x = np.stack(np.meshgrid(np.arange(n), np.arange(n), indexing="ij"), -1).astype(float)
    ks = rng.normal(size=(3, 2))
    ks *= (2 * np.pi / wavelength) / np.linalg.norm(ks, axis=1, keepdims=True)
    ks *= rng.uniform(0.5, 1, (3, 1))
    phase = rng.uniform(0, 2 * np.pi, 3)
    amp = rng.uniform(0.5, 1, 3)

    def g(y):
        return sum(amp[i] * np.sin(y @ ks[i] + phase[i]) for i in range(3))

    s = make_smooth_field((n, n), seed_seq(seed, 5), magnitude=1.0, smoothness_scale=4.0,
                          fold_free=False)
    return g(x + s), g(x)


def denoiser_like_params(seed, noise=0.03):
    """Two-layer network close to ``z - highpass(z)`` plus a random perturbation.

    The hidden layer splits each channel into its positive and negative parts
    (``relu(z) - relu(-z) = z``), the output layer applies ``delta - blur`` to
    both, so the unperturbed network maps a field to its high-pass residual.
    """
    rng = np.random.default_rng(seed)
    w1 = np.zeros((3, 3, 2, 4))
    for c in range(2):
        w1[1, 1, c, 2 * c] = 1.0
        w1[1, 1, c, 2 * c + 1] = -1.0
    k = -np.outer([1, 2, 1], [1, 2, 1]) / 16.0
    k[1, 1] += 1.0
    w2 = np.zeros((3, 3, 4, 2))
    for c in range(2):
        w2[:, :, 2 * c, c] = k
        w2[:, :, 2 * c + 1, c] = -k
    w1 += noise * rng.normal(size=w1.shape)
    w2 += noise * 0.3 * rng.normal(size=w2.shape)
    return ConvNetParams([w1, w2], [noise * 0.1 * rng.normal(size=4),
                                    noise * 0.1 * rng.normal(size=2)])


def tiny_configs():
    gamma0 = 128.0
    pirate_cfg = PirateConfig(gamma0=gamma0, alpha=1.0 / gamma0, tau=0.5 / gamma0,
                              downsample=True)
    return DeqConfig(max_iter=2000, tol=1e-11), pirate_cfg
