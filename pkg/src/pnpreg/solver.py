"""Fixed-point iteration with optional Anderson acceleration, step schedules, Adam."""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


# ---------------------------------------------------------------------------
# step size schedule


@dataclass(frozen=True)
class StepSchedule:
    gamma0: float
    t_max: int
    mode: str = "cosine"  # or "fixed"

    def __post_init__(self):
        if not self.gamma0 > 0:
            raise ValueError("gamma0 must be positive")
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        if self.mode not in ("cosine", "fixed"):
            raise ValueError(f"unknown schedule mode {self.mode!r}")


def step_size(schedule: StepSchedule, t: int) -> float:
    """Cosine decay from ``gamma0`` at t=0 to 0 at ``t_max``, or a constant."""
    if not 0 <= t <= schedule.t_max:
        raise ValueError(f"iteration {t} outside [0, {schedule.t_max}]")
    if schedule.mode == "fixed":
        return schedule.gamma0
    return 0.5 * schedule.gamma0 * (1.0 + math.cos(math.pi * t / schedule.t_max))


# ---------------------------------------------------------------------------
# fixed point solver


@dataclass(frozen=True)
class AndersonConfig:
    memory: int = 5
    beta: float = 1.0
    reg: float = 1e-8
    max_iter: int = 500
    tol: float = 1e-4
    # absolute residual growth (vs. the first one) treated as divergence
    divergence_ratio: float = 1e8
    # condition number above which the mixing weights are not trusted
    max_condition: float = 1e12

    def __post_init__(self):
        if self.memory < 1:
            raise ValueError("memory must be >= 1")
        if not 0.0 < self.beta <= 1.0:
            raise ValueError("beta must lie in (0, 1]")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass
class FixedPointResult:
    x: np.ndarray
    residuals: list = field(default_factory=list)
    converged: bool = False
    diverged: bool = False
    nfe: int = 0
    fallbacks: int = 0


def _anderson_weights(g_hist: np.ndarray, reg: float, max_condition: float):
    """Affine-constrained least squares ``min ||G^T a||, sum(a) = 1``."""
    k = g_hist.shape[0]
    gram = g_hist @ g_hist.T
    scale = float(np.max(np.diag(gram)))
    if not np.isfinite(scale) or scale <= 0.0:
        return None
    system = np.zeros((k + 1, k + 1))
    system[0, 1:] = 1.0
    system[1:, 0] = 1.0
    system[1:, 1:] = gram / scale + reg * np.eye(k)
    rhs = np.zeros(k + 1)
    rhs[0] = 1.0
    if np.linalg.cond(system) > max_condition:
        return None
    try:
        sol = np.linalg.solve(system, rhs)
    except np.linalg.LinAlgError:
        return None
    alpha = sol[1:]
    return alpha if np.all(np.isfinite(alpha)) else None


def fixed_point(op: Callable[[np.ndarray, int], np.ndarray], x0,
                cfg: AndersonConfig = AndersonConfig(), mode: str = "anderson",
                callback: Callable[[int, np.ndarray], None] | None = None) -> FixedPointResult:
    """Iterate ``x <- op(x, k)`` until the relative residual drops below ``cfg.tol``.

    ``op`` receives the iteration index so time-dependent steps can be
    expressed; operators that do not need it ignore it. The relative residual
    is ``||op(x) - x|| / max(||x||, 1)``. On convergence the returned ``x``
    is ``op`` applied to the converged iterate; on divergence it is the last
    finite iterate; otherwise the iterate after ``max_iter`` steps.
    """
    if mode not in ("plain", "anderson"):
        raise ValueError(f"unknown mode {mode!r}")
    x = np.array(x0, dtype=np.float64, copy=True)
    shape = x.shape
    xs: deque = deque(maxlen=cfg.memory + 1)
    fs: deque = deque(maxlen=cfg.memory + 1)
    res = FixedPointResult(x=x)
    first_abs = None
    for k in range(cfg.max_iter):
        fx = np.asarray(op(x, k), dtype=np.float64)
        res.nfe += 1
        if fx.shape != shape:
            raise ValueError(f"operator changed the shape {shape} -> {fx.shape}")
        if not np.all(np.isfinite(fx)):
            res.x, res.diverged = x, True
            return res
        if callback is not None:
            callback(k, fx)
        diff = fx - x
        abs_res = float(np.linalg.norm(diff))
        rel = abs_res / max(float(np.linalg.norm(x)), 1.0)
        res.residuals.append(rel)
        if first_abs is None:
            first_abs = max(abs_res, np.finfo(float).tiny)
        elif abs_res > cfg.divergence_ratio * first_abs:
            res.x, res.diverged = x, True
            return res
        if rel < cfg.tol:
            res.x, res.converged = fx, True
            return res
        if mode == "plain":
            x = fx
            continue
        xs.append(x.ravel())
        fs.append(fx.ravel())
        if len(xs) == 1:
            x = fx
            continue
        x_hist = np.stack(xs)
        f_hist = np.stack(fs)
        alpha = _anderson_weights(f_hist - x_hist, cfg.reg, cfg.max_condition)
        if alpha is None:
            res.fallbacks += 1
            x = fx
            continue
        mixed = cfg.beta * (alpha @ f_hist) + (1.0 - cfg.beta) * (alpha @ x_hist)
        x = mixed.reshape(shape)
    res.x = x
    return res


def write_residual_csv(path, residuals, objectives=None) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "residual", "objective"])
        for i, r in enumerate(residuals):
            obj = "" if objectives is None else repr(float(objectives[i]))
            writer.writerow([i, repr(float(r)), obj])


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **kw) -> "AdamState":
        return cls(m=[np.zeros_like(p, dtype=np.float64) for p in params],
                   v=[np.zeros_like(p, dtype=np.float64) for p in params], **kw)


def adam_step(state: AdamState, params, grads, lr: float) -> list:
    """One bias-corrected Adam update; ``state`` is advanced in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and state must have the same length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient passed to adam_step")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        out.append(p - lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out
