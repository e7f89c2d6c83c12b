"""Supervised training of the ConvNet denoiser on noisy/clean field pairs."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..solver import AdamState, adam_step
from .convnet import ConvNetParams, convnet_backward, convnet_forward, init_convnet


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class NoisyFieldSample:
    clean: np.ndarray
    noisy: np.ndarray
    sigma: float

    def __post_init__(self):
        if self.clean.shape != self.noisy.shape:
            raise ValueError("clean and noisy fields must have the same shape")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")


@dataclass(frozen=True)
class DenoiserTrainingConfig:
    sigma: float
    epochs: int = 30
    learning_rate: float = 1e-3
    batch_size: int = 8
    seed: int = 0
    hidden: int = 16
    layers: int = 4

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainingResult:
    params: ConvNetParams
    adam: AdamState
    epochs_done: int
    log: list = field(default_factory=list)


def train_denoiser(dataset, cfg: DenoiserTrainingConfig, init: ConvNetParams | None = None,
                   adam: AdamState | None = None, start_epoch: int = 0,
                   on_epoch=None) -> TrainingResult:
    """Minimise the MSE between ``denoise(noisy)`` and ``clean`` with Adam.

    Minibatch order for epoch ``e`` comes from ``default_rng([seed, e])``, so a
    run resumed from a checkpoint taken after epoch ``e`` (params, Adam state
    and ``start_epoch=e``) follows the uninterrupted trajectory exactly.
    ``on_epoch(epoch, params, adam, loss)`` is called after every epoch.
    """
    samples = list(dataset)
    if not samples:
        raise ValueError("empty training set")
    shape = samples[0].clean.shape
    if any(s.clean.shape != shape for s in samples):
        raise ValueError("all training fields must have the same shape")
    ndim = len(shape) - 1
    clean = np.stack([s.clean for s in samples]).astype(np.float64)
    noisy = np.stack([s.noisy for s in samples]).astype(np.float64)

    params = init if init is not None else init_convnet(
        ndim, hidden=cfg.hidden, layers=cfg.layers, seed=cfg.seed)
    params = params.copy()
    if adam is None:
        adam = AdamState.zeros_like(params.arrays())
    log = []
    n = len(samples)
    for epoch in range(start_epoch, cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    out, cache = convnet_forward(params, noisy[idx])
                    err = out - clean[idx]
                    loss = float(np.mean(err * err))
            except FloatingPointError:
                loss = float("nan")
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch starting {start}")
            grads, _ = convnet_backward(params, cache, 2.0 * err / err.size,
                                        want_input=False)
            params = ConvNetParams.from_arrays(
                adam_step(adam, params.arrays(), grads.arrays(), cfg.learning_rate))
            losses.append(loss)
        epoch_loss = float(np.mean(losses))
        log.append({"epoch": epoch, "loss": epoch_loss})
        if on_epoch is not None:
            on_epoch(epoch, params, adam, epoch_loss)
    return TrainingResult(params=params, adam=adam, epochs_done=max(cfg.epochs, start_epoch),
                          log=log)


def denoising_mse(denoiser, samples) -> float:
    """Mean squared error of ``denoiser(noisy)`` against ``clean``."""
    errs = [np.mean((denoiser(s.noisy) - s.clean) ** 2) for s in samples]
    return float(np.mean(errs))
