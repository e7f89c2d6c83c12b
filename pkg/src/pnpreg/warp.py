"""Multilinear warping of a moving image by a displacement field.

``warp(m, u)(x)`` samples ``m`` at ``x + u(x)``. Sample coordinates are
clamped to ``[0, extent - 1]`` so no artificial zeros leak into the image
statistics used by the similarity terms.
"""

from __future__ import annotations

import itertools

import numpy as np

from .grid import as_field, as_volume, identity_grid


def _check(m: np.ndarray, u: np.ndarray) -> None:
    if u.shape[:-1] != m.shape:
        raise ValueError(f"field dims {u.shape[:-1]} do not match image dims {m.shape}")


def _cells(dims, u):
    """Lower cell corner, fractional offset and in-range flag per axis."""
    coords = identity_grid(dims) + u
    lo, frac, inside = [], [], []
    for a, n in enumerate(dims):
        c = coords[..., a]
        inside.append((c >= 0.0) & (c <= n - 1))
        c = np.clip(c, 0.0, n - 1)
        i0 = np.clip(np.floor(c).astype(np.intp), 0, max(n - 2, 0))
        lo.append(i0)
        frac.append(c - i0)
    return lo, frac, inside


def _corner_values(m, lo, corner):
    dims = m.shape
    idx = tuple(np.minimum(i0 + bit, n - 1) for i0, bit, n in zip(lo, corner, dims))
    return m[idx]


def warp(m, u) -> np.ndarray:
    m = as_volume(m)
    u = as_field(u)
    _check(m, u)
    lo, frac, _ = _cells(m.shape, u)
    out = np.zeros(m.shape)
    for corner in itertools.product((0, 1), repeat=m.ndim):
        w = np.ones(m.shape)
        for bit, t in zip(corner, frac):
            w = w * (t if bit else 1.0 - t)
        out += w * _corner_values(m, lo, corner)
    return out


def warp_input_gradient(m, u) -> np.ndarray:
    """Derivative of ``warp(m, u)`` with respect to ``u``, voxel by voxel.

    Returns an array shaped like ``u``; entry ``[..., a]`` is
    ``d warp(m, u)(x) / d u_a(x)``. This is the exact derivative of the
    multilinear interpolant (piecewise constant inside a cell), which is what
    finite differences of :func:`warp` see. Clamped coordinates get zero.
    """
    m = as_volume(m)
    u = as_field(u)
    _check(m, u)
    ndim = m.ndim
    lo, frac, inside = _cells(m.shape, u)
    grad = np.zeros(u.shape)
    for corner in itertools.product((0, 1), repeat=ndim):
        vals = _corner_values(m, lo, corner)
        for a in range(ndim):
            w = vals if corner[a] else -vals
            for b, (bit, t) in enumerate(zip(corner, frac)):
                if b != a:
                    w = w * (t if bit else 1.0 - t)
            grad[..., a] += w
    for a in range(ndim):
        grad[..., a] *= inside[a]
    return grad


def warp_nearest(labels, u) -> np.ndarray:
    """Nearest-neighbour resampling at ``x + u(x)`` (rounding halves up)."""
    labels = np.asarray(labels)
    u = as_field(u)
    if u.shape[:-1] != labels.shape:
        raise ValueError(
            f"field dims {u.shape[:-1]} do not match mask dims {labels.shape}")
    coords = identity_grid(labels.shape) + u
    idx = tuple(
        np.clip(np.floor(coords[..., a] + 0.5).astype(np.intp), 0, n - 1)
        for a, n in enumerate(labels.shape))
    return labels[idx]
