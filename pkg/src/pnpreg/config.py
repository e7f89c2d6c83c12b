"""Plain ``key = value`` configuration files and the two shipped presets.

A config is a flat dict of typed values. Files may start from a preset with
``preset = desk`` and override any key; blank lines and ``#`` comments are
ignored. The registration step can be given absolutely (``gamma0``, ``alpha``,
``tau``) or, as in the desk preset, per voxel (``step_per_voxel``) with the
weights fixed through their products with the step (``alpha_step`` per field
voxel, ``tau_step``); absolute values win when both are present.
"""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import numpy as np

from . import grid
from .deq import DeqConfig
from .pirate import (
    DESK_ALPHA_STEP_PER_FIELD_VOXEL,
    DESK_STEP_PER_VOXEL,
    DESK_TAU_STEP,
    DESK_TV_WEIGHT,
    PirateConfig,
)


class ConfigError(ValueError):
    pass


_TYPES = {
    "gamma0": float, "alpha": float, "tau": float,
    "step_per_voxel": float, "alpha_step": float, "tau_step": float,
    "t_max": int, "schedule": str, "downsample": "bool", "solver": str, "tol": float,
    "tv_weight": float, "tv_iters": int,
    "sigmas": "floats", "denoiser_epochs": int, "denoiser_lr": float, "batch_size": int,
    "train_samples": int, "hidden": int, "layers": int,
    "deq_w0": float, "deq_w1": float, "deq_w2": float, "deq_lr": float, "deq_epochs": int,
    "ncc_window": int, "deq_max_iter": int, "deq_tol": float, "jfb_threshold": float,
}

PRESETS = {
    "desk": {
        "step_per_voxel": DESK_STEP_PER_VOXEL, "alpha_step": DESK_ALPHA_STEP_PER_FIELD_VOXEL,
        "tau_step": DESK_TAU_STEP, "t_max": 500, "schedule": "cosine", "downsample": True,
        "solver": "plain", "tol": 1e-6, "tv_weight": DESK_TV_WEIGHT, "tv_iters": 30,
        # the noise sweep rescaled to field magnitudes of a few voxels
        "sigmas": [round(0.1 * k, 1) for k in range(1, 11)],
        "denoiser_epochs": 30, "denoiser_lr": 1e-3, "batch_size": 8, "train_samples": 40,
        "hidden": 16, "layers": 4,
        "deq_w0": 1.0, "deq_w1": 5.0, "deq_w2": 1.0, "deq_lr": 1e-4, "deq_epochs": 10,
        "ncc_window": 5, "deq_max_iter": 200, "deq_tol": 1e-4, "jfb_threshold": 1e-2,
    },
    "paper-scale": {
        "gamma0": 5e5, "alpha": 5e-1, "tau": 1e-7, "t_max": 500, "schedule": "cosine",
        "downsample": True, "solver": "plain", "tol": 1e-6, "tv_weight": DESK_TV_WEIGHT,
        "tv_iters": 30, "sigmas": [float(k) for k in range(1, 11)],
        "denoiser_epochs": 400, "denoiser_lr": 1e-4, "batch_size": 8, "train_samples": 100,
        "hidden": 16, "layers": 4,
        "deq_w0": 1.0, "deq_w1": 5.0, "deq_w2": 1.0, "deq_lr": 1e-5, "deq_epochs": 50,
        "ncc_window": 9, "deq_max_iter": 200, "deq_tol": 1e-4, "jfb_threshold": 1e-2,
    },
}


def parse_value(key: str, text: str):
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _TYPES[key]
    text = text.strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "floats":
            return [float(v) for v in text.split(",") if v.strip()]
        return kind(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def load_config(source: str = "desk", overrides: dict | None = None) -> dict:
    """Preset name or path to a key-value file, then ``overrides`` on top."""
    if source in PRESETS:
        cfg = dict(PRESETS[source])
    else:
        path = Path(source)
        if not path.is_file():
            raise ConfigError(f"no preset or config file named {source!r}")
        preset = "desk"
        values = {}
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key == "preset":
                if value not in PRESETS:
                    raise ConfigError(f"{path}:{lineno}: unknown preset {value!r}")
                preset = value
                continue
            values[key] = parse_value(key, value)
        cfg = {**PRESETS[preset], **values}
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        cfg[key] = value
    return cfg


def dump_config(cfg: dict) -> str:
    lines = []
    for key in sorted(cfg):
        value = cfg[key]
        if isinstance(value, list):
            value = ",".join(repr(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def pirate_config(cfg: dict, dims, denoiser=None) -> PirateConfig:
    """Resolve the step and weights for images of size ``dims``."""
    if "gamma0" in cfg:
        gamma0 = cfg["gamma0"]
    elif "step_per_voxel" in cfg:
        gamma0 = cfg["step_per_voxel"] * int(np.prod(dims))
    else:
        raise ConfigError("config needs gamma0 or step_per_voxel")
    field = grid.coarse_dims(dims) if cfg["downsample"] else tuple(dims)
    alpha = (cfg["alpha"] if "alpha" in cfg
             else cfg.get("alpha_step", 0.0) * int(np.prod(field)) / gamma0)
    tau = cfg["tau"] if "tau" in cfg else cfg.get("tau_step", 0.0) / gamma0
    try:
        return PirateConfig(gamma0=gamma0, alpha=alpha, tau=tau, t_max=cfg["t_max"],
                            schedule=cfg["schedule"], downsample=cfg["downsample"],
                            solver=cfg["solver"], tol=cfg["tol"], denoiser=denoiser)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def deq_config(cfg: dict, **overrides) -> DeqConfig:
    base = DeqConfig(w0=cfg["deq_w0"], w1=cfg["deq_w1"], w2=cfg["deq_w2"],
                     learning_rate=cfg["deq_lr"], epochs=cfg["deq_epochs"],
                     ncc_window=cfg["ncc_window"], max_iter=cfg["deq_max_iter"],
                     tol=cfg["deq_tol"], jfb_threshold=cfg["jfb_threshold"])
    return replace(base, **{k: v for k, v in overrides.items() if v is not None})
