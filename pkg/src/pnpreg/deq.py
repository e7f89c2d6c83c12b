"""Fine-tuning the ConvNet denoiser through the registration fixed point.

The registration operator ``T_theta`` is one fixed-step update; its fixed
point does not depend on the step size, only the speed of reaching it does.
Training minimises::

    loss = w0 * ncc(f, warp(m, u)) + w1 * smoothness(u) + w2 * jacobian_loss(u)

at the fixed point, where ``u`` is the fixed point brought to full
resolution. The parameter gradient is the Jacobian-free approximation: the
loss gradient is backpropagated through a single application of ``T_theta``
instead of through the whole solve.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import grid
from .denoiser.convnet import ConvNetDenoiser, ConvNetParams, convnet_param_gradient
from .metrics import (
    jacobian_loss,
    jacobian_loss_gradient,
    ncc,
    ncc_gradient,
    smoothness,
    smoothness_gradient,
)
from .pirate import PirateConfig, field_dims, full_resolution, pirate_update
from .solver import AdamState, AndersonConfig, adam_step, fixed_point, step_size
from .warp import warp

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DeqConfig:
    w0: float = 1.0
    w1: float = 5.0
    w2: float = 1.0
    learning_rate: float = 1e-4
    epochs: int = 10
    ncc_window: int = 5
    jfb_threshold: float = 1e-2
    max_iter: int = 200
    tol: float = 1e-4
    anderson_memory: int = 5
    seed: int = 0

    def __post_init__(self):
        if min(self.w0, self.w1, self.w2) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be non-negative")

    def solver_config(self) -> AndersonConfig:
        return AndersonConfig(memory=self.anderson_memory, max_iter=self.max_iter, tol=self.tol)


def paper_deq_config() -> DeqConfig:
    return DeqConfig(w0=1.0, w1=5.0, w2=1.0, learning_rate=1e-5, epochs=50)


# ---------------------------------------------------------------------------
# loss


def deq_loss(u, f, m, cfg: DeqConfig):
    """Weighted loss on a full-resolution field; returns ``(total, terms)``.

    ``terms`` holds the weighted pieces ``ncc``, ``smoothness`` and
    ``jacobian``; their sum is ``total``.
    """
    u = grid.as_field(u)
    terms = {
        "ncc": cfg.w0 * ncc(f, warp(m, u), cfg.ncc_window) if cfg.w0 else 0.0,
        "smoothness": cfg.w1 * smoothness(u) if cfg.w1 else 0.0,
        "jacobian": cfg.w2 * jacobian_loss(u) if cfg.w2 else 0.0,
    }
    return float(terms["ncc"] + terms["smoothness"] + terms["jacobian"]), terms


def deq_loss_field_gradient(u, f, m, cfg: DeqConfig) -> np.ndarray:
    """Gradient of :func:`deq_loss` with respect to the full-resolution field."""
    u = grid.as_field(u)
    grad = np.zeros_like(u)
    if cfg.w0:
        grad += cfg.w0 * ncc_gradient(f, m, u, cfg.ncc_window)
    if cfg.w1:
        grad += cfg.w1 * smoothness_gradient(u)
    if cfg.w2:
        grad += cfg.w2 * jacobian_loss_gradient(u)
    return grad


def iterate_loss(phi, f, m, cfg: DeqConfig, pirate_cfg: PirateConfig):
    """Loss of an iterate living on the registration grid."""
    return deq_loss(full_resolution(phi, f.shape, pirate_cfg), f, m, cfg)


def iterate_loss_gradient(phi, f, m, cfg: DeqConfig, pirate_cfg: PirateConfig) -> np.ndarray:
    g = deq_loss_field_gradient(full_resolution(phi, f.shape, pirate_cfg), f, m, cfg)
    if pirate_cfg.downsample:
        g = grid.upsample_field_adjoint(g, phi.shape[:-1])
    return g


# ---------------------------------------------------------------------------
# fixed point operator and gradient


def deq_operator_config(pirate_cfg: PirateConfig, params: ConvNetParams) -> PirateConfig:
    """The time-invariant operator: fixed step, ConvNet denoiser plugged in."""
    return replace(pirate_cfg, schedule="fixed", denoiser=ConvNetDenoiser(params),
                   use_denoiser=True)


def deq_forward(params, f, m, cfg: DeqConfig, pirate_cfg: PirateConfig, phi0=None):
    """Anderson-accelerated solve of ``phi = T_theta(phi)`` from the identity."""
    f = grid.as_volume(f)
    m = grid.as_volume(m)
    op_cfg = deq_operator_config(pirate_cfg, params)
    phi = grid.zero_field(field_dims(f.shape, op_cfg)) if phi0 is None else grid.as_field(phi0)

    def op(x, _k):
        try:
            return pirate_update(x, f, m, op_cfg, 0)
        except FloatingPointError:
            return np.full_like(x, np.nan)

    with np.errstate(over="ignore", invalid="ignore"):
        return fixed_point(op, phi, cfg.solver_config(), mode="anderson")


@dataclass
class JfbResult:
    grad: ConvNetParams
    residual: float     # relative fixed-point residual at phi_bar
    flagged: bool       # residual above the validity threshold


def jfb_gradient(params: ConvNetParams, phi_bar, f, m, cfg: DeqConfig,
                 pirate_cfg: PirateConfig) -> JfbResult:
    """Jacobian-free parameter gradient at a (near) fixed point ``phi_bar``.

    Only the denoiser term of ``T_theta`` depends on the parameters:
    ``T = phi - gamma*(... + tau*(phi - D(phi)))`` so ``dT/dtheta =
    gamma*tau*dD/dtheta`` and the gradient is that Jacobian, transposed,
    applied to the loss gradient.
    """
    f = grid.as_volume(f)
    m = grid.as_volume(m)
    phi_bar = grid.as_field(phi_bar)
    op_cfg = deq_operator_config(pirate_cfg, params)
    residual = float(np.linalg.norm(pirate_update(phi_bar, f, m, op_cfg, 0) - phi_bar)
                     / max(float(np.linalg.norm(phi_bar)), 1.0))
    flagged = residual > cfg.jfb_threshold
    scale = step_size(op_cfg.step_schedule, 0) * pirate_cfg.tau
    if scale == 0.0:
        zeros = ConvNetParams.from_arrays([np.zeros_like(a) for a in params.arrays()])
        return JfbResult(zeros, residual, flagged)
    upstream = iterate_loss_gradient(phi_bar, f, m, cfg, pirate_cfg)
    grad = convnet_param_gradient(params, phi_bar, upstream)
    grad = ConvNetParams.from_arrays([scale * a for a in grad.arrays()])
    return JfbResult(grad, residual, flagged)


# ---------------------------------------------------------------------------
# training loop


LOG_COLUMNS = ("epoch", "pair", "loss", "ncc_term", "smt_term", "jac_term", "nfe",
               "residual", "status", "wall_time")


@dataclass
class FinetuneResult:
    params: ConvNetParams
    adam: AdamState
    log: list = field(default_factory=list)
    epoch_summary: list = field(default_factory=list)
    skipped: int = 0
    attempted: int = 0


def finetune(pairs, params0: ConvNetParams, cfg: DeqConfig, pirate_cfg: PirateConfig,
             adam: AdamState | None = None, start_epoch: int = 0, timing: bool = True,
             on_epoch=None) -> FinetuneResult:
    """Update the denoiser pair by pair through the registration fixed point.

    Pairs whose forward solve diverges are skipped and logged with status
    ``diverged``. Pair order is permuted per epoch from ``cfg.seed``.
    ``wall_time`` is 0 when ``timing`` is off.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("need at least one pair")
    params = params0.copy()
    if adam is None:
        adam = AdamState.zeros_like(params.arrays())
    result = FinetuneResult(params=params, adam=adam)
    for epoch in range(start_epoch, cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(pairs))
        losses, nfes = [], []
        for idx in order:
            pair = pairs[int(idx)]
            start = time.perf_counter()
            result.attempted += 1
            fwd = deq_forward(params, pair.fixed, pair.moving, cfg, pirate_cfg)
            row = {"epoch": epoch, "pair": pair.name or str(int(idx)), "nfe": fwd.nfe}
            if fwd.diverged:
                result.skipped += 1
                log.warning("epoch %d: forward solve diverged on %s, skipped", epoch, row["pair"])
                row.update(loss=float("nan"), ncc_term=float("nan"), smt_term=float("nan"),
                           jac_term=float("nan"), residual=float("nan"), status="diverged")
            else:
                total, terms = iterate_loss(fwd.x, pair.fixed, pair.moving, cfg, pirate_cfg)
                jfb = jfb_gradient(params, fwd.x, pair.fixed, pair.moving, cfg, pirate_cfg)
                if cfg.learning_rate > 0:
                    params = ConvNetParams.from_arrays(
                        adam_step(adam, params.arrays(), jfb.grad.arrays(), cfg.learning_rate))
                row.update(loss=total, ncc_term=terms["ncc"], smt_term=terms["smoothness"],
                           jac_term=terms["jacobian"], residual=jfb.residual,
                           status="flagged" if jfb.flagged else "ok")
                losses.append(total)
                nfes.append(fwd.nfe)
            row["wall_time"] = time.perf_counter() - start if timing else 0.0
            result.log.append(row)
        summary = {"epoch": epoch,
                   "mean_loss": float(np.mean(losses)) if losses else float("nan"),
                   "mean_nfe": float(np.mean(nfes)) if nfes else float("nan"),
                   "skipped": len(pairs) - len(losses)}
        result.epoch_summary.append(summary)
        log.info("epoch %d: loss %.6g, nfe %.1f", epoch, summary["mean_loss"], summary["mean_nfe"])
        result.params = params
        if on_epoch is not None:
            on_epoch(epoch, params, adam)
    result.params = params
    return result


def write_log_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(float(v)) if isinstance(v, float) else v)
                             for k, v in row.items()})
