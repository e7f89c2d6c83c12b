"""Objectives, their gradients with respect to the field, and evaluation metrics.

Every similarity term is ``1 - correlation`` with the correlation's
denominator stabilised as ``sqrt((sigma_f * sigma_w)**2 + EPS**2)``: a flat
image gives a zero correlation instead of a division by zero, while the value
for images with real contrast moves by less than ``EPS**2 / (sigma_f sigma_w)**2``.
"""

from __future__ import annotations

import numpy as np

from .grid import as_field, as_volume
from .warp import warp, warp_input_gradient, warp_nearest

EPS = 1e-5


def _same_dims(f, w):
    if f.shape != w.shape:
        raise ValueError(f"dims differ: {f.shape} vs {w.shape}")


# ---------------------------------------------------------------------------
# global cross correlation


def gcc(f, w, eps: float = EPS) -> float:
    """One minus the Pearson correlation of ``f`` and ``w`` over the whole grid."""
    f = as_volume(f)
    w = as_volume(w)
    _same_dims(f, w)
    if f.size < 2:
        raise ValueError("gcc needs at least two voxels")
    fc = f - f.mean()
    wc = w - w.mean()
    cov = np.mean(fc * wc)
    denom = np.sqrt(np.mean(fc * fc) * np.mean(wc * wc) + eps * eps)
    return float(1.0 - cov / denom)


def gcc_image_gradient(f, w, eps: float = EPS) -> np.ndarray:
    """d gcc(f, w) / d w."""
    f = as_volume(f)
    w = as_volume(w)
    _same_dims(f, w)
    n = f.size
    if np.ptp(f) == 0.0:
        # the correlation is identically zero; avoid rounding noise in f - mean(f)
        return np.zeros(f.shape)
    fc = f - f.mean()
    wc = w - w.mean()
    vf = np.mean(fc * fc)
    cov = np.mean(fc * wc)
    denom = np.sqrt(vf * np.mean(wc * wc) + eps * eps)
    return -(fc / denom - cov * vf * wc / denom**3) / n


def gcc_gradient(f, m, u, eps: float = EPS) -> np.ndarray:
    """Gradient of ``gcc(f, warp(m, u))`` with respect to the field ``u``."""
    w = warp(m, u)
    return gcc_image_gradient(f, w, eps)[..., None] * warp_input_gradient(m, u)


# ---------------------------------------------------------------------------
# windowed (local) normalized cross correlation


def box_sum(a: np.ndarray, half: int) -> np.ndarray:
    """Sum over the window ``[x - half, x + half]`` per axis, clipped at the borders."""
    out = np.asarray(a, dtype=np.float64)
    for axis in range(out.ndim):
        n = out.shape[axis]
        c = np.cumsum(out, axis=axis)
        c = np.concatenate([np.zeros_like(np.take(c, [0], axis=axis)), c], axis=axis)
        idx = np.arange(n)
        hi = np.minimum(idx + half + 1, n)
        lo = np.maximum(idx - half, 0)
        out = np.take(c, hi, axis=axis) - np.take(c, lo, axis=axis)
    return out


def _check_window(shape, window: int) -> int:
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be an odd integer >= 3, got {window}")
    if window > min(shape):
        raise ValueError(f"window {window} exceeds the smallest extent {min(shape)}")
    return window // 2


def _ncc_stats(f, w, half, eps):
    count = box_sum(np.ones(f.shape), half)
    mu_f = box_sum(f, half) / count
    mu_w = box_sum(w, half) / count
    var_f = box_sum(f * f, half) / count - mu_f * mu_f
    var_w = box_sum(w * w, half) / count - mu_w * mu_w
    cov = box_sum(f * w, half) / count - mu_f * mu_w
    denom = np.sqrt(var_f * var_w + eps * eps)
    return count, mu_f, mu_w, var_f, cov, denom


def ncc(f, w, window: int = 9, eps: float = EPS) -> float:
    """One minus the mean local correlation over ``window``-wide cubes."""
    f = as_volume(f)
    w = as_volume(w)
    _same_dims(f, w)
    half = _check_window(f.shape, window)
    _, _, _, _, cov, denom = _ncc_stats(f, w, half, eps)
    return float(1.0 - np.mean(cov / denom))


def ncc_image_gradient(f, w, window: int = 9, eps: float = EPS) -> np.ndarray:
    """d ncc(f, w) / d w.

    The local correlation at x is affine in w(y) for every y of its window,
    ``A(x) f(y) + B(x) w(y) + C(x)``; windows are symmetric, so summing over
    the windows that contain y is another box sum.
    """
    f = as_volume(f)
    w = as_volume(w)
    _same_dims(f, w)
    half = _check_window(f.shape, window)
    count, mu_f, mu_w, var_f, cov, denom = _ncc_stats(f, w, half, eps)
    a = 1.0 / (count * denom)
    b = -cov * var_f / (count * denom**3)
    c = -(mu_f * a + mu_w * b)
    grad = box_sum(a, half) * f + box_sum(b, half) * w + box_sum(c, half)
    return -grad / f.size


def ncc_gradient(f, m, u, window: int = 9, eps: float = EPS) -> np.ndarray:
    w = warp(m, u)
    return ncc_image_gradient(f, w, window, eps)[..., None] * warp_input_gradient(m, u)


# ---------------------------------------------------------------------------
# smoothness


def _forward_diff_adjoint(d: np.ndarray, axis: int) -> np.ndarray:
    """Adjoint of ``np.diff(., axis=axis)``."""
    pad = [(0, 0)] * d.ndim
    pad[axis] = (1, 1)
    p = np.pad(d, pad)
    n = p.shape[axis]
    return np.take(p, np.arange(n - 1), axis=axis) - np.take(p, np.arange(1, n), axis=axis)


def _check_extents(u):
    if min(u.shape[:-1]) < 2:
        raise ValueError(f"every extent must be >= 2, got {u.shape[:-1]}")


def smoothness(u) -> float:
    """Sum over axes and channels of the mean squared forward difference."""
    u = as_field(u)
    _check_extents(u)
    channels = u.shape[-1]
    return float(sum(channels * np.mean(np.diff(u, axis=a) ** 2)
                     for a in range(u.ndim - 1)))


def smoothness_gradient(u) -> np.ndarray:
    u = as_field(u)
    _check_extents(u)
    grad = np.zeros_like(u)
    for a in range(u.ndim - 1):
        d = np.diff(u, axis=a)
        grad += _forward_diff_adjoint(2.0 * d / d.size * u.shape[-1], a)
    return grad


# ---------------------------------------------------------------------------
# Jacobian determinant


def _deriv(u: np.ndarray, axis: int) -> np.ndarray:
    """Forward difference, repeated (backward) at the far boundary."""
    d = np.diff(u, axis=axis)
    last = np.take(d, [d.shape[axis] - 1], axis=axis)
    return np.concatenate([d, last], axis=axis)


def _deriv_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    n = g.shape[axis]
    folded = np.take(g, np.arange(n - 1), axis=axis).copy()
    idx = [slice(None)] * g.ndim
    idx[axis] = n - 2
    folded[tuple(idx)] += np.take(g, n - 1, axis=axis)
    return _forward_diff_adjoint(folded, axis)


def _jacobian_matrix(u: np.ndarray) -> np.ndarray:
    """``J[..., k, a] = delta_ka + d u_k / d x_a``."""
    ndim = u.ndim - 1
    jac = np.stack([_deriv(u, a) for a in range(ndim)], axis=-1)
    return jac + np.eye(ndim)


def _det_and_cofactor(jac: np.ndarray):
    ndim = jac.shape[-1]
    if ndim == 2:
        a00, a01 = jac[..., 0, 0], jac[..., 0, 1]
        a10, a11 = jac[..., 1, 0], jac[..., 1, 1]
        det = a00 * a11 - a01 * a10
        cof = np.stack([np.stack([a11, -a10], -1), np.stack([-a01, a00], -1)], -2)
        return det, cof
    if ndim == 3:
        r0, r1, r2 = jac[..., 0, :], jac[..., 1, :], jac[..., 2, :]
        cof = np.stack([np.cross(r1, r2), np.cross(r2, r0), np.cross(r0, r1)], axis=-2)
        det = np.sum(r0 * cof[..., 0, :], axis=-1)
        return det, cof
    raise ValueError(f"only 2D and 3D fields are supported, got {ndim}D")


def jacobian_map(u) -> np.ndarray:
    """Per-voxel ``det(I + du/dx)``; negative values mark folding."""
    u = as_field(u)
    _check_extents(u)
    det, _ = _det_and_cofactor(_jacobian_matrix(u))
    return det


def negative_jd_ratio(jac) -> float:
    jac = np.asarray(jac)
    return float(np.count_nonzero(jac < 0) / jac.size)


def jacobian_loss(u) -> float:
    """Mean of ``relu(-J)**2`` over voxels."""
    jac = jacobian_map(u)
    return float(np.mean(np.maximum(-jac, 0.0) ** 2))


def jacobian_loss_gradient(u) -> np.ndarray:
    u = as_field(u)
    _check_extents(u)
    det, cof = _det_and_cofactor(_jacobian_matrix(u))
    dl_ddet = -2.0 * np.maximum(-det, 0.0) / det.size
    grad = np.zeros_like(u)
    if not np.any(dl_ddet):
        return grad
    ndim = u.ndim - 1
    for k in range(ndim):
        for a in range(ndim):
            grad[..., k] += _deriv_adjoint(dl_ddet * cof[..., k, a], a)
    return grad


# ---------------------------------------------------------------------------
# evaluation


def dsc(a, b, labels=None):
    """Per-label Dice overlap and their mean.

    Labels absent from both masks are left out. Returns ``(per_label, mean)``;
    ``mean`` is NaN when no label is present.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    _same_dims(a, b)
    if labels is None:
        labels = np.union1d(np.unique(a), np.unique(b))
        labels = labels[labels != 0]
    scores = {}
    for lab in labels:
        in_a = a == lab
        in_b = b == lab
        total = np.count_nonzero(in_a) + np.count_nonzero(in_b)
        if total == 0:
            continue
        scores[int(lab)] = 2.0 * np.count_nonzero(in_a & in_b) / total
    mean = float(np.mean(list(scores.values()))) if scores else float("nan")
    return scores, mean


def warp_mask(mask, u) -> np.ndarray:
    """Carry labels along the field without blending them."""
    return warp_nearest(mask, u)
