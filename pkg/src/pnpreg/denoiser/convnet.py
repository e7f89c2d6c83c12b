"""Small residual convolutional denoiser with hand-written backward passes.

Architecture: ``conv -> relu`` repeated, then a final conv that predicts the
noise; the output is ``z - residual``. Convolutions are 'same'
cross-correlations with zero padding, no batch norm. Weights have shape
``(k,) * D + (c_in, c_out)``.

Inputs are a single field ``dims + (D,)`` or a batch ``(B,) + dims + (D,)``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np


@dataclass
class ConvNetParams:
    weights: list
    biases: list

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight and at least one layer")
        ndim = self.weights[0].ndim - 2
        prev = None
        for w, b in zip(self.weights, self.biases):
            if w.ndim != ndim + 2:
                raise ValueError("all kernels must have the same dimensionality")
            if any(k != w.shape[0] or k % 2 == 0 for k in w.shape[:ndim]):
                raise ValueError(f"kernels must be cubic with odd size, got {w.shape}")
            if b.shape != (w.shape[-1],):
                raise ValueError(f"bias shape {b.shape} does not match kernel {w.shape}")
            if prev is not None and w.shape[-2] != prev:
                raise ValueError("layer channels do not chain")
            prev = w.shape[-1]
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError("parameters must be finite")
        if self.weights[0].shape[-2] != ndim or self.weights[-1].shape[-1] != ndim:
            raise ValueError("first input and last output channels must equal D")

    @property
    def ndim(self) -> int:
        return self.weights[0].ndim - 2

    @property
    def layer_shapes(self) -> list:
        return [tuple(w.shape) for w in self.weights]

    def arrays(self) -> list:
        """Flat list ``[W0, b0, W1, b1, ...]``."""
        return [a for pair in zip(self.weights, self.biases) for a in pair]

    @classmethod
    def from_arrays(cls, arrays) -> "ConvNetParams":
        arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
        return cls(weights=arrays[0::2], biases=arrays[1::2])

    def copy(self) -> "ConvNetParams":
        return ConvNetParams.from_arrays([a.copy() for a in self.arrays()])


def init_convnet(ndim: int, hidden: int = 16, layers: int = 4, kernel: int = 3,
                 seed: int = 0, last_scale: float = 0.1) -> ConvNetParams:
    """He-normal kernels, zero biases; the last layer is scaled down so the
    untrained network starts close to the identity."""
    if layers < 1:
        raise ValueError("need at least one layer")
    rng = np.random.default_rng(seed)
    chans = [ndim] + [hidden] * (layers - 1) + [ndim]
    weights, biases = [], []
    for i in range(layers):
        fan_in = kernel**ndim * chans[i]
        w = rng.normal(0.0, math.sqrt(2.0 / fan_in), (kernel,) * ndim + (chans[i], chans[i + 1]))
        if i == layers - 1:
            w *= last_scale
        weights.append(w)
        biases.append(np.zeros(chans[i + 1]))
    return ConvNetParams(weights, biases)


# ---------------------------------------------------------------------------
# convolution as matrix products


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(B, *dims, C) -> (B * prod(dims), k**D * C)."""
    ndim = x.ndim - 2
    dims = x.shape[1:-1]
    p = k // 2
    xp = np.pad(x, [(0, 0)] + [(p, p)] * ndim + [(0, 0)])
    cols = np.empty(x.shape[:-1] + (k**ndim, x.shape[-1]))
    for j, off in enumerate(itertools.product(range(k), repeat=ndim)):
        sl = (slice(None),) + tuple(slice(o, o + n) for o, n in zip(off, dims))
        cols[..., j, :] = xp[sl]
    return cols.reshape(-1, k**ndim * x.shape[-1])


def _col2im(cols: np.ndarray, shape, k: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`."""
    ndim = len(shape) - 2
    dims = shape[1:-1]
    p = k // 2
    cols = cols.reshape(tuple(shape[:-1]) + (k**ndim, shape[-1]))
    out = np.zeros((shape[0],) + tuple(n + 2 * p for n in dims) + (shape[-1],))
    for j, off in enumerate(itertools.product(range(k), repeat=ndim)):
        sl = (slice(None),) + tuple(slice(o, o + n) for o, n in zip(off, dims))
        out[sl] += cols[..., j, :]
    crop = (slice(None),) + tuple(slice(p, p + n) for n in dims)
    return out[crop]


def _as_batch(params: ConvNetParams, z):
    z = np.asarray(z, dtype=np.float64)
    ndim = params.ndim
    if z.shape[-1] != ndim:
        raise ValueError(
            f"network expects {ndim} channels, field has {z.shape[-1]}")
    if z.ndim == ndim + 1:
        return z[None], True
    if z.ndim == ndim + 2:
        return z, False
    raise ValueError(f"field shape {z.shape} does not match a {ndim}D network")


@dataclass
class ForwardCache:
    shapes: list   # input shape of every layer, batch form
    cols: list     # im2col matrix of every layer input
    masks: list    # relu masks of hidden layers
    single: bool


def convnet_forward(params: ConvNetParams, z):
    """Returns ``(z - residual, cache)``."""
    zb, single = _as_batch(params, z)
    h = zb
    cache = ForwardCache([], [], [], single)
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        k = w.shape[0]
        cols = _im2col(h, k)
        pre = cols @ w.reshape(-1, w.shape[-1]) + b
        cache.shapes.append(h.shape)
        cache.cols.append(cols)
        out_shape = h.shape[:-1] + (w.shape[-1],)
        if i < last:
            mask = pre > 0
            cache.masks.append(mask)
            h = np.where(mask, pre, 0.0).reshape(out_shape)
        else:
            h = pre.reshape(out_shape)
    out = zb - h
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite activation in denoiser forward pass")
    return (out[0] if single else out), cache


def convnet_backward(params: ConvNetParams, cache: ForwardCache, upstream,
                     want_input: bool = True, trainable=None):
    """Backpropagate ``<upstream, output>``.

    Returns ``(param_grad, input_grad)``; ``param_grad`` is a
    :class:`ConvNetParams` holding gradients, zero for layers whose entry in
    ``trainable`` is false.
    """
    g = np.asarray(upstream, dtype=np.float64)
    if cache.single:
        g = g[None]
    if g.shape != cache.shapes[0]:
        raise ValueError(f"upstream shape {g.shape} != forward input {cache.shapes[0]}")
    n_layers = len(params.weights)
    if trainable is None:
        trainable = [True] * n_layers
    if len(trainable) != n_layers:
        raise ValueError("trainable mask needs one entry per layer")
    dw = [None] * n_layers
    db = [None] * n_layers
    # d<g, z - residual>/d residual = -g
    d_pre = -g.reshape(-1, g.shape[-1])
    d_in = None
    for i in range(n_layers - 1, -1, -1):
        w = params.weights[i]
        if trainable[i]:
            dw[i] = (cache.cols[i].T @ d_pre).reshape(w.shape)
            db[i] = d_pre.sum(axis=0)
        else:
            dw[i] = np.zeros_like(w)
            db[i] = np.zeros_like(params.biases[i])
        if i == 0 and not want_input:
            break
        d_cols = d_pre @ w.reshape(-1, w.shape[-1]).T
        d_in = _col2im(d_cols, cache.shapes[i], w.shape[0])
        if i > 0:
            d_pre = d_in.reshape(-1, d_in.shape[-1]) * cache.masks[i - 1]
    grads = ConvNetParams(dw, db)
    input_grad = None
    if want_input:
        input_grad = g + d_in
        if cache.single:
            input_grad = input_grad[0]
    return grads, input_grad


def convnet_param_gradient(params: ConvNetParams, z, upstream, trainable=None) -> ConvNetParams:
    """Gradient of ``<upstream, convnet(z)>`` with respect to every kernel and bias."""
    _, cache = convnet_forward(params, z)
    grads, _ = convnet_backward(params, cache, upstream, want_input=False,
                                trainable=trainable)
    return grads


def convnet_input_gradient(params: ConvNetParams, z, upstream) -> np.ndarray:
    """Gradient of ``<upstream, convnet(z)>`` with respect to ``z``."""
    _, cache = convnet_forward(params, z)
    return convnet_backward(params, cache, upstream)[1]


@dataclass
class ConvNetDenoiser:
    params: ConvNetParams
    sigma: float | None = None  # noise level it was trained for, informational

    def __call__(self, z) -> np.ndarray:
        return convnet_forward(self.params, z)[0]
