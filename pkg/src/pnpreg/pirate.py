"""Plug-and-play registration: gradient steps on a similarity penalty plus a
smoothness term plus a denoiser residual acting on the field.

One iteration is::

    phi <- phi - gamma_t * (grad gcc(f, warp(m, phi))
                            + alpha * grad smoothness(phi)
                            + tau * (phi - D(phi)))

With ``downsample`` on, ``phi`` lives on a half-resolution grid. It is
upsampled before warping, the penalty gradient is pulled back to the coarse
grid with the adjoint of that upsampling, and the smoothness and denoiser
terms act on the coarse field directly.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import grid
from .metrics import (
    dsc,
    gcc,
    gcc_gradient,
    jacobian_loss,
    jacobian_map,
    negative_jd_ratio,
    smoothness,
    smoothness_gradient,
    warp_mask,
)
from .solver import AndersonConfig, StepSchedule, fixed_point, step_size
from .warp import warp

VARIANTS = ("P", "P+R", "P+S", "P+D", "P+R+S", "P+D+S")


class MissingDenoiserError(ValueError):
    """An ablation variant needs a denoiser that was not supplied."""


@dataclass(frozen=True)
class PirateConfig:
    gamma0: float
    alpha: float
    tau: float
    t_max: int = 500
    schedule: str = "cosine"
    downsample: bool = True
    denoiser: object = None
    use_penalty: bool = True
    use_smoothness: bool = True
    use_denoiser: bool = True
    solver: str = "plain"
    tol: float = 1e-6
    anderson_memory: int = 5

    def __post_init__(self):
        if not self.gamma0 > 0:
            raise ValueError("gamma0 must be positive")
        if self.alpha < 0 or self.tau < 0:
            raise ValueError("alpha and tau must be non-negative")
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        if self.solver not in ("plain", "anderson"):
            raise ValueError(f"unknown solver {self.solver!r}")
        StepSchedule(self.gamma0, self.t_max, self.schedule)

    @property
    def step_schedule(self) -> StepSchedule:
        return StepSchedule(self.gamma0, self.t_max, self.schedule)

    @property
    def denoiser_active(self) -> bool:
        return self.use_denoiser and self.denoiser is not None and self.tau > 0

    def solver_config(self) -> AndersonConfig:
        return AndersonConfig(memory=self.anderson_memory, max_iter=self.t_max, tol=self.tol)


def paper_config(denoiser=None) -> PirateConfig:
    """Hyperparameters reported for full-size 3D brain MRI."""
    return PirateConfig(gamma0=5e5, alpha=5e-1, tau=1e-7, t_max=500,
                        denoiser=denoiser)


# Desk-scale defaults. The penalty gradient is a mean over voxels, so the
# step that moves a voxel by a given amount grows with the voxel count; the
# smoothness and denoiser weights are fixed through their products with the
# step, which is what sets the stability of the iteration. The smoothness
# gradient is a mean over the field's voxels, so alpha * gamma0 scales with
# the field size: the largest curvature of the smoothness term is about
# 8 * ndim / n_field, giving alpha * gamma0 * 8 * ndim / n_field = 0.39 * ndim,
# below the explicit-step limit of 2 in 2D and 3D.
DESK_STEP_PER_VOXEL = 1.0
DESK_ALPHA_STEP_PER_FIELD_VOXEL = 50.0 / 1024   # alpha * gamma0 / n_field
DESK_TAU_STEP = 0.5      # tau * gamma0
DESK_TV_WEIGHT = 0.05


def desk_config(dims=(64, 64), denoiser=None, **overrides) -> PirateConfig:
    dims = tuple(int(d) for d in dims)
    gamma0 = DESK_STEP_PER_VOXEL * int(np.prod(dims))
    n_field = int(np.prod(grid.coarse_dims(dims) if overrides.get("downsample", True) else dims))
    cfg = PirateConfig(gamma0=gamma0, alpha=DESK_ALPHA_STEP_PER_FIELD_VOXEL * n_field / gamma0,
                       tau=DESK_TAU_STEP / gamma0, t_max=500, denoiser=denoiser)
    return replace(cfg, **overrides)


def variant_config(cfg: PirateConfig, variant: str, pretrained=None,
                   finetuned=None) -> PirateConfig:
    """Switch terms on/off for one ablation variant.

    P: penalty, S: smoothness, R: pre-trained denoiser, D: fine-tuned denoiser.
    Without explicit denoisers, ``cfg.denoiser`` serves as R.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    parts = set(variant.split("+"))
    denoiser = None
    if "R" in parts:
        denoiser = pretrained if pretrained is not None else cfg.denoiser
        if denoiser is None:
            raise MissingDenoiserError(f"variant {variant} needs a pre-trained denoiser")
    if "D" in parts:
        denoiser = finetuned
        if denoiser is None:
            raise MissingDenoiserError(f"variant {variant} needs a fine-tuned denoiser")
    return replace(cfg, use_penalty=True, use_smoothness="S" in parts,
                   use_denoiser=denoiser is not None, denoiser=denoiser)


# ---------------------------------------------------------------------------
# iteration


def field_dims(image_dims, cfg: PirateConfig) -> tuple:
    return grid.coarse_dims(image_dims) if cfg.downsample else tuple(image_dims)


def full_resolution(phi, image_dims, cfg: PirateConfig) -> np.ndarray:
    """The field applied to the moving image."""
    if cfg.downsample:
        return grid.upsample_field(phi, image_dims)
    return np.asarray(phi, dtype=np.float64)


def penalty_gradient(phi, f, m, cfg: PirateConfig) -> np.ndarray:
    if not cfg.downsample:
        return gcc_gradient(f, m, phi)
    full = grid.upsample_field(phi, f.shape)
    return grid.upsample_field_adjoint(gcc_gradient(f, m, full), phi.shape[:-1])


def pirate_terms(phi, f, m, cfg: PirateConfig) -> dict:
    """The three weighted contributions to the update direction.

    Disabled terms are exact zeros.
    """
    f = grid.as_volume(f)
    m = grid.as_volume(m)
    phi = grid.as_field(phi)
    expected = field_dims(f.shape, cfg)
    if phi.shape[:-1] != expected:
        raise ValueError(f"field dims {phi.shape[:-1]} != expected {expected}")
    zero = np.zeros_like(phi)
    terms = {
        "penalty": penalty_gradient(phi, f, m, cfg) if cfg.use_penalty else zero,
        "smoothness": cfg.alpha * smoothness_gradient(phi)
        if cfg.use_smoothness and cfg.alpha > 0 else zero,
        "denoiser": cfg.tau * (phi - cfg.denoiser(phi)) if cfg.denoiser_active else zero,
    }
    return terms


def pirate_update(phi, f, m, cfg: PirateConfig, t: int) -> np.ndarray:
    gamma = step_size(cfg.step_schedule, t)
    terms = pirate_terms(phi, f, m, cfg)
    update = phi - gamma * (terms["penalty"] + terms["smoothness"] + terms["denoiser"])
    if not np.all(np.isfinite(update)):
        raise FloatingPointError(f"non-finite field after iteration {t}")
    return update


# ---------------------------------------------------------------------------
# registration


TRACE_COLUMNS = ("iteration", "gcc", "smoothness", "jac_loss", "neg_jd_ratio", "step_size")


def field_summary(f, m, u) -> dict:
    jac = jacobian_map(u)
    return {
        "gcc": gcc(f, warp(m, u)),
        "smoothness": smoothness(u),
        "jac_loss": float(np.mean(np.maximum(-jac, 0.0) ** 2)),
        "neg_jd_ratio": negative_jd_ratio(jac),
    }


@dataclass
class RegistrationResult:
    field: np.ndarray          # full resolution, applied to the moving image
    coarse_field: np.ndarray   # the iterate (same as field without downsampling)
    trace: list = field(default_factory=list)
    initial: dict = field(default_factory=dict)
    nfe: int = 0
    converged: bool = False
    diverged: bool = False
    residuals: list = field(default_factory=list)


def register(f, m, cfg: PirateConfig, phi0=None, record_trace: bool = True) -> RegistrationResult:
    """Register ``m`` onto ``f`` starting from the identity (zero displacement).

    Stops when the relative change of the field drops below ``cfg.tol`` or
    after ``cfg.t_max`` iterations. A non-finite update stops the run with
    ``diverged`` set and the last finite field returned.
    """
    f = grid.as_volume(f)
    m = grid.as_volume(m)
    if f.shape != m.shape:
        raise ValueError(f"fixed {f.shape} and moving {m.shape} dims differ")
    dims = field_dims(f.shape, cfg)
    phi = grid.zero_field(dims) if phi0 is None else grid.as_field(phi0)
    trace = []
    initial = field_summary(f, m, full_resolution(phi, f.shape, cfg)) if record_trace else {}

    def op(x, t):
        try:
            return pirate_update(x, f, m, cfg, t)
        except FloatingPointError:
            return np.full_like(x, np.nan)

    def record(t, x):
        row = {"iteration": t}
        row.update(field_summary(f, m, full_resolution(x, f.shape, cfg)))
        row["step_size"] = step_size(cfg.step_schedule, t)
        trace.append(row)

    with np.errstate(over="ignore", invalid="ignore"):
        res = fixed_point(op, phi, cfg.solver_config(), mode=cfg.solver,
                          callback=record if record_trace else None)
    return RegistrationResult(field=full_resolution(res.x, f.shape, cfg), coarse_field=res.x,
                              trace=trace, initial=initial, nfe=res.nfe,
                              converged=res.converged, diverged=res.diverged,
                              residuals=res.residuals)


def write_trace_csv(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS)
        writer.writeheader()
        for row in trace:
            writer.writerow({k: (repr(float(row[k])) if k != "iteration" else row[k])
                             for k in TRACE_COLUMNS})


# ---------------------------------------------------------------------------
# evaluation and ablation


def evaluate_registration(pair, u) -> dict:
    """DSC of the warped moving labels against the fixed labels, plus field quality."""
    warped_labels = warp_mask(pair.moving_labels, u)
    per_label, mean = dsc(pair.fixed_labels, warped_labels)
    jac = jacobian_map(u)
    return {
        "dsc": mean,
        "dsc_per_label": per_label,
        "neg_jd_ratio": negative_jd_ratio(jac),
        "jac_loss": jacobian_loss(u),
        "gcc": gcc(pair.fixed, warp(pair.moving, u)),
    }


def baseline_dsc(pair) -> float:
    return dsc(pair.fixed_labels, pair.moving_labels)[1]


ABLATION_COLUMNS = ("variant", "dsc_mean", "dsc_var", "neg_jd_mean", "neg_jd_var",
                    "jac_loss_mean", "runtime", "diverged")


def ablation_suite(pairs, cfg: PirateConfig, pretrained=None, finetuned=None,
                   variants=VARIANTS, timing: bool = True):
    """Register every pair with every variant; one summary row per variant.

    ``runtime`` is the mean wall time per pair in seconds (0 when ``timing``
    is off, which keeps the table byte-reproducible).
    """
    rows = []
    per_pair = {}
    for variant in variants:
        vcfg = variant_config(cfg, variant, pretrained, finetuned)
        scores, neg, jl, times, diverged = [], [], [], [], 0
        for pair in pairs:
            start = time.perf_counter()
            res = register(pair.fixed, pair.moving, vcfg, record_trace=False)
            times.append(time.perf_counter() - start)
            diverged += res.diverged
            ev = evaluate_registration(pair, res.field)
            scores.append(ev["dsc"])
            neg.append(ev["neg_jd_ratio"])
            jl.append(ev["jac_loss"])
        per_pair[variant] = {"dsc": scores, "neg_jd_ratio": neg, "jac_loss": jl}
        rows.append({
            "variant": variant,
            "dsc_mean": float(np.mean(scores)),
            "dsc_var": float(np.var(scores)),
            "neg_jd_mean": float(np.mean(neg)),
            "neg_jd_var": float(np.var(neg)),
            "jac_loss_mean": float(np.mean(jl)),
            "runtime": float(np.mean(times)) if timing else 0.0,
            "diverged": diverged,
        })
    return rows, per_pair


def write_table_csv(path, rows, columns=ABLATION_COLUMNS) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v)
                             for k, v in row.items() if k in columns})
