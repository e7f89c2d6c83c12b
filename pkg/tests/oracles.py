"""Independent reference implementations used by the tests.

Everything here is written from the defining formulas with explicit loops and
shares no code with the package, so agreement is evidence of correctness
rather than of self-consistency.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

EPS = 1e-5


def central_difference(fun, x, h=1e-6):
    """Gradient of a scalar function by central differences, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = fun(x)
        flat[i] = old - h
        down = fun(x)
        flat[i] = old
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(b), np.linalg.norm(a), 1e-300)
    return float(np.linalg.norm(a - b) / scale)


def generic_field(rng, dims, scale=0.4):
    """Small random displacements kept away from integer sample positions,
    where the multilinear interpolant has kinks."""
    u = rng.uniform(-scale, scale, tuple(dims) + (len(dims),))
    return np.where(np.abs(u) < 0.02, 0.05, u)


def pearson_gcc(f, w, eps=EPS):
    """1 - correlation written out as plain sums."""
    f = np.asarray(f, dtype=np.float64).ravel()
    w = np.asarray(w, dtype=np.float64).ravel()
    n = f.size
    mf = sum(f) / n
    mw = sum(w) / n
    cov = sum((a - mf) * (b - mw) for a, b in zip(f, w)) / n
    vf = sum((a - mf) ** 2 for a in f) / n
    vw = sum((b - mw) ** 2 for b in w) / n
    return 1.0 - cov / math.sqrt(vf * vw + eps * eps)


def brute_ncc(f, w, window, eps=EPS):
    """Per-voxel windowed correlation with explicit, border-clipped windows."""
    f = np.asarray(f, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    half = window // 2
    vals = []
    for idx in itertools.product(*[range(n) for n in f.shape]):
        sl = tuple(slice(max(i - half, 0), min(i + half + 1, n)) for i, n in zip(idx, f.shape))
        a = f[sl].ravel()
        b = w[sl].ravel()
        vals.append(1.0 - (pearson_gcc(a, b, eps) if a.size > 1 else 1.0))
    return 1.0 - float(np.mean(vals))


def loop_warp(m, u):
    """Multilinear sampling at x + u(x) with clamped coordinates, voxel by voxel."""
    m = np.asarray(m, dtype=np.float64)
    dims = m.shape
    out = np.zeros(dims)
    for idx in itertools.product(*[range(n) for n in dims]):
        c = [min(max(i + u[idx][a], 0.0), n - 1) for a, (i, n) in enumerate(zip(idx, dims))]
        lo = [min(int(math.floor(v)), n - 2) if n > 1 else 0 for v, n in zip(c, dims)]
        t = [v - l for v, l in zip(c, lo)]
        acc = 0.0
        for corner in itertools.product((0, 1), repeat=len(dims)):
            wgt = 1.0
            pos = []
            for a, bit in enumerate(corner):
                wgt *= t[a] if bit else 1.0 - t[a]
                pos.append(min(lo[a] + bit, dims[a] - 1))
            acc += wgt * m[tuple(pos)]
        out[idx] = acc
    return out


def loop_nearest(labels, u):
    """Label at the source coordinate rounded half-up, clamped to the grid."""
    labels = np.asarray(labels)
    out = np.zeros_like(labels)
    for idx in itertools.product(*[range(n) for n in labels.shape]):
        src = tuple(min(max(int(math.floor(i + u[idx][a] + 0.5)), 0), n - 1)
                    for a, (i, n) in enumerate(zip(idx, labels.shape)))
        out[idx] = labels[src]
    return out


def loop_smoothness(u):
    """Sum over axes and channels of the mean squared forward difference."""
    u = np.asarray(u, dtype=np.float64)
    ndim = u.ndim - 1
    total = 0.0
    for axis in range(ndim):
        for ch in range(u.shape[-1]):
            sq = []
            for idx in itertools.product(*[range(n) for n in u.shape[:-1]]):
                if idx[axis] + 1 >= u.shape[axis]:
                    continue
                nxt = list(idx)
                nxt[axis] += 1
                sq.append((u[tuple(nxt)][ch] - u[idx][ch]) ** 2)
            total += float(np.mean(sq))
    return total


def loop_jacobian(u):
    """det(I + du/dx) with forward differences, backward at the last index."""
    u = np.asarray(u, dtype=np.float64)
    dims = u.shape[:-1]
    ndim = len(dims)
    out = np.zeros(dims)
    for idx in itertools.product(*[range(n) for n in dims]):
        jac = np.eye(ndim)
        for a in range(ndim):
            i = idx[a]
            lo, hi = (i, i + 1) if i + 1 < dims[a] else (i - 1, i)
            p_lo = list(idx)
            p_hi = list(idx)
            p_lo[a], p_hi[a] = lo, hi
            jac[:, a] += u[tuple(p_hi)] - u[tuple(p_lo)]
        out[idx] = np.linalg.det(jac)
    return out


def count_negative(jac) -> float:
    jac = np.asarray(jac).ravel()
    return sum(1 for v in jac if v < 0) / len(jac)


def set_dice(a, b, label) -> float:
    sa = {i for i, v in enumerate(np.asarray(a).ravel()) if v == label}
    sb = {i for i, v in enumerate(np.asarray(b).ravel()) if v == label}
    return 2.0 * len(sa & sb) / (len(sa) + len(sb))


def _diff_matrix(n):
    """Forward difference with a zero last row (no neighbour past the edge)."""
    mat = np.zeros((n, n))
    for i in range(n - 1):
        mat[i, i] = -1.0
        mat[i, i + 1] = 1.0
    return mat


def tv_prox_cvxpy(z, weight):
    """Isotropic TV prox of one 2D channel, solved by a generic conic solver.

    Per pixel the gradient is (x[i+1,j]-x[i,j], x[i,j+1]-x[i,j]) with a zero
    component where the neighbour lies outside the grid.
    """
    import cvxpy as cp

    z = np.asarray(z, dtype=np.float64)
    h, w = z.shape
    gx = np.kron(_diff_matrix(h), np.eye(w))
    gy = np.kron(np.eye(h), _diff_matrix(w))
    x = cp.Variable(h * w)
    tv = cp.sum(cp.norm(cp.vstack([gx @ x, gy @ x]), 2, axis=0))
    prob = cp.Problem(cp.Minimize(0.5 * cp.sum_squares(x - z.ravel()) + weight * tv))
    prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-10, tol_gap_rel=1e-10, tol_feas=1e-10)
    return np.asarray(x.value).reshape(h, w)


def tv_prox_1d_step(values, weight):
    """Closed-form prox of a two-level step signal on a line.

    For ``[a]*k + [b]*(n-k)`` with a < b, TV is ``|b-a|`` and the minimiser
    keeps the step shape: the lower level rises by ``weight/k``, the upper
    one drops by ``weight/(n-k)``, until they meet at the overall mean.
    """
    values = np.asarray(values, dtype=np.float64)
    n = values.size
    k = int(np.argmax(values != values[0]))
    a, b = values[0], values[-1]
    lo = a + math.copysign(weight / k, b - a)
    hi = b - math.copysign(weight / (n - k), b - a)
    if (hi - lo) * (b - a) <= 0:
        return np.full(n, values.mean())
    return np.concatenate([np.full(k, lo), np.full(n - k, hi)])


def gaussian_marginal_score(mean, cov, sigma, z, h=1e-5):
    """-sigma^2 * grad log N(z; mean, cov + sigma^2 I) by central differences."""
    mean = np.asarray(mean, dtype=np.float64)
    c = np.asarray(cov, dtype=np.float64) + sigma**2 * np.eye(mean.size)
    inv = np.linalg.inv(c)
    _, logdet = np.linalg.slogdet(c)

    def logp(x):
        d = x - mean
        return -0.5 * (d @ inv @ d) - 0.5 * logdet - 0.5 * mean.size * math.log(2 * math.pi)

    return -(sigma**2) * central_difference(logp, z, h)


def adam_by_hand(p, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Scalar Adam trajectory written out step by step."""
    m = v = 0.0
    traj = []
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mh = m / (1 - beta1**t)
        vh = v / (1 - beta2**t)
        p = p - lr * mh / (math.sqrt(vh) + eps)
        traj.append(p)
    return traj


def conv_same(x, w, b):
    """Zero-padded 'same' cross-correlation of one (dims..., C_in) input, by loops."""
    k = w.shape[0]
    half = k // 2
    dims = x.shape[:-1]
    out = np.zeros(dims + (w.shape[-1],))
    for idx in itertools.product(*[range(n) for n in dims]):
        acc = b.astype(np.float64).copy()
        for off in itertools.product(range(k), repeat=len(dims)):
            src = tuple(i + o - half for i, o in zip(idx, off))
            if all(0 <= s < n for s, n in zip(src, dims)):
                acc += x[src] @ w[off]
        out[idx] = acc
    return out


def loop_convnet(weights, biases, z):
    h = np.asarray(z, dtype=np.float64)
    for i, (w, b) in enumerate(zip(weights, biases)):
        h = conv_same(h, w, b)
        if i < len(weights) - 1:
            h = np.maximum(h, 0.0)
    return z - h
