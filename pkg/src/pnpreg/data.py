"""Synthetic registration data: phantoms, smooth deformations, pairs, denoiser sets.

Everything is a deterministic function of its seed. Seeds may be ints or
int sequences (anything ``numpy.random.default_rng`` accepts); per-pair seeds
are derived as ``[seed, index, purpose]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import grid
from .denoiser.training import NoisyFieldSample
from .metrics import jacobian_map, negative_jd_ratio, warp_mask
from .warp import warp

MIN_PHANTOM_EXTENT = 16

DESK_DIMS = (64, 64)
DESK_MAGNITUDE = 4.0
DESK_SMOOTHNESS = 8.0
# max displacement / smoothing scale below which generated fields have been
# fold-free in every draw we tried; fold_free=True still checks each field
FOLD_FREE_RATIO = 0.6


def seed_seq(seed, *tail) -> list:
    """Flatten an int or (nested) int sequence plus extra entries into one list."""
    out = []
    for item in (seed, *tail):
        if np.isscalar(item):
            out.append(int(item))
        else:
            out.extend(seed_seq(*item) if len(item) else [])
    return out


class FoldError(ValueError):
    """A field requested to be fold-free has negative Jacobian determinants."""


@dataclass
class RegistrationPair:
    fixed: np.ndarray
    moving: np.ndarray
    fixed_labels: np.ndarray
    moving_labels: np.ndarray
    gt_field: np.ndarray | None = None
    name: str = ""


# ---------------------------------------------------------------------------
# phantoms


def _smooth_radius(rng, coords, center, radii, wobble):
    """Normalised radial distance to a randomly wobbling ellipsoid (<1 inside)."""
    rel = (coords - center) / radii
    r = np.sqrt(np.sum(rel * rel, axis=-1))
    direction = rel / np.maximum(r, 1e-9)[..., None]
    mod = np.zeros(r.shape)
    for _ in range(3):
        freq = rng.normal(0.0, 1.5, coords.shape[-1])
        mod += rng.uniform(-wobble, wobble) * np.cos(direction @ freq + rng.uniform(0, 2 * np.pi))
    return r / (1.0 + mod)


def make_phantom(dims, seed=0, complexity: int = 4):
    """Brain-like piecewise smooth phantom with matching labels.

    Labels: 1 outer shell, 2 inner tissue, 3.. ``complexity`` blobs inside the
    inner tissue. Intensities lie in [0, 1]; edges are softened by a one-voxel
    blur while the labels stay sharp.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) not in (2, 3):
        raise ValueError("phantoms are 2D or 3D")
    if min(dims) < MIN_PHANTOM_EXTENT:
        raise ValueError(f"every extent must be >= {MIN_PHANTOM_EXTENT}, got {dims}")
    if complexity < 2:
        raise ValueError("complexity must be >= 2 (at least four labels)")
    ndim = len(dims)
    for attempt in range(100):
        rng = np.random.default_rng(seed_seq(seed, attempt))
        coords = np.stack(np.meshgrid(*[np.linspace(-1, 1, d) for d in dims],
                                      indexing="ij"), axis=-1)
        labels = np.zeros(dims, dtype=np.uint16)
        values = {0: 0.0}
        outer = rng.uniform(0.72, 0.85, ndim)
        center = rng.uniform(-0.05, 0.05, ndim)
        labels[_smooth_radius(rng, coords, center, outer, 0.06) < 1] = 1
        values[1] = rng.uniform(0.25, 0.4)
        inner = outer * rng.uniform(0.68, 0.78)
        labels[_smooth_radius(rng, coords, center, inner, 0.1) < 1] = 2
        values[2] = rng.uniform(0.55, 0.7)
        for lab in range(3, 3 + complexity):
            c = center + rng.uniform(-0.5, 0.5, ndim) * inner
            radii = rng.uniform(0.12, 0.3, ndim)
            labels[(_smooth_radius(rng, coords, c, radii, 0.15) < 1) & (labels >= 2)] = lab
            values[lab] = rng.uniform(0.05, 0.45) if lab % 2 else rng.uniform(0.75, 1.0)
        counts = np.bincount(labels.ravel(), minlength=3 + complexity)
        if np.all(counts[1:] > 0):
            break
    else:  # pragma: no cover - astronomically unlikely
        raise RuntimeError("could not place all phantom structures")
    lut = np.array([values[i] for i in range(3 + complexity)])
    image = lut[labels]
    bias = gaussian_filter(rng.normal(size=dims), max(dims) / 6.0, mode="reflect")
    bias *= 0.05 / max(np.max(np.abs(bias)), 1e-12)
    image = gaussian_filter(image * (1.0 + bias), 1.0, mode="nearest")
    return np.clip(image, 0.0, 1.0), labels


# ---------------------------------------------------------------------------
# deformations


def make_smooth_field(dims, seed=0, magnitude: float = DESK_MAGNITUDE,
                      smoothness_scale: float = DESK_SMOOTHNESS,
                      fold_free: bool = True) -> np.ndarray:
    """Gaussian-filtered white noise per channel, scaled so the largest
    displacement vector has length ``magnitude`` (voxels)."""
    dims = tuple(int(d) for d in dims)
    if magnitude < 0:
        raise ValueError("magnitude must be non-negative")
    if not smoothness_scale > 0:
        raise ValueError("smoothness_scale must be positive")
    if magnitude == 0:
        return grid.zero_field(dims)
    rng = np.random.default_rng(seed_seq(seed))
    u = np.stack([gaussian_filter(rng.normal(size=dims), smoothness_scale, mode="reflect")
                  for _ in dims], axis=-1)
    u *= magnitude / np.max(np.sqrt(np.sum(u * u, axis=-1)))
    if fold_free and negative_jd_ratio(jacobian_map(u)) > 0:
        raise FoldError(
            f"field folds (magnitude {magnitude}, smoothness {smoothness_scale}); "
            f"keep magnitude / smoothness_scale below {FOLD_FREE_RATIO}")
    return u


def make_pair(volume, labels, gt_field, name: str = "") -> RegistrationPair:
    """The phantom is the fixed image; the moving image is it warped by ``gt_field``."""
    volume = grid.as_volume(volume)
    gt_field = grid.as_field(gt_field)
    if gt_field.shape[:-1] != volume.shape or labels.shape != volume.shape:
        raise ValueError("phantom, labels and field dims must agree")
    return RegistrationPair(fixed=volume, moving=warp(volume, gt_field),
                            fixed_labels=np.asarray(labels),
                            moving_labels=warp_mask(labels, gt_field),
                            gt_field=gt_field, name=name)


def make_pairs(n: int, dims=DESK_DIMS, seed=0, magnitude: float = DESK_MAGNITUDE,
               smoothness_scale: float = DESK_SMOOTHNESS, complexity: int = 4):
    if n < 1:
        raise ValueError("need at least one pair")
    pairs = []
    for i in range(n):
        vol, lab = make_phantom(dims, seed_seq(seed, i, 0), complexity)
        u = make_smooth_field(dims, seed_seq(seed, i, 1), magnitude, smoothness_scale)
        pairs.append(make_pair(vol, lab, u, name=f"pair_{i:03d}"))
    return pairs


def make_denoiser_dataset(n: int, sigmas, seed=0, source: str = "synthetic",
                          dims=DESK_DIMS, magnitude: float = DESK_MAGNITUDE,
                          smoothness_scale: float = DESK_SMOOTHNESS,
                          pirate_cfg=None):
    """Noisy/clean half-resolution field pairs, ``n`` per noise level.

    ``source='synthetic'`` uses generated smooth fields; ``'ps-baseline'``
    uses fields estimated by penalty+smoothness registration of synthetic
    pairs (``pirate_cfg`` sets the registration, default: desk preset).
    """
    if n < 1:
        raise ValueError("need at least one sample")
    sigmas = [float(s) for s in np.atleast_1d(sigmas)]
    if source == "synthetic":
        cleans = [grid.downsample_field(
            make_smooth_field(dims, seed_seq(seed, i, 2), magnitude, smoothness_scale))
            for i in range(n)]
    elif source == "ps-baseline":
        from .pirate import desk_config, register, variant_config
        cfg = variant_config(pirate_cfg or desk_config(dims), "P+S")
        if not cfg.downsample:
            raise ValueError("ps-baseline fields must be estimated at half resolution")
        pairs = make_pairs(n, dims, seed_seq(seed, 3), magnitude, smoothness_scale)
        cleans = [register(p.fixed, p.moving, cfg, record_trace=False).coarse_field
                  for p in pairs]
    else:
        raise ValueError(f"unknown source {source!r}")
    samples = []
    for j, sigma in enumerate(sigmas):
        rng = np.random.default_rng(seed_seq(seed, 4, j))
        for clean in cleans:
            samples.append(NoisyFieldSample(
                clean=clean, noisy=clean + sigma * rng.normal(size=clean.shape), sigma=sigma))
    return samples


# ---------------------------------------------------------------------------
# on-disk datasets

_PAIR_FILES = {
    "fixed": ("fixed", grid.write_volume, grid.read_volume),
    "moving": ("moving", grid.write_volume, grid.read_volume),
    "fixed_labels": ("fixed_labels", grid.write_mask, grid.read_mask),
    "moving_labels": ("moving_labels", grid.write_mask, grid.read_mask),
    "gt_field": ("gt_field", grid.write_field, grid.read_field),
}


def save_pairs(root, pairs, params: dict) -> Path:
    """Write each pair to ``root/<name>/`` and a ``manifest.json`` index."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, pair in enumerate(pairs):
        name = pair.name or f"pair_{i:03d}"
        files = {}
        for key, (stem, writer, _) in _PAIR_FILES.items():
            value = getattr(pair, key)
            if value is None:
                continue
            rel = f"{name}/{stem}{grid.HEADER_SUFFIX}"
            writer(value, root / rel)
            files[key] = rel
        entries.append({"name": name, "index": i, "files": files})
    manifest = {"format": "pnpreg-dataset", "parameters": params, "pairs": entries}
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_pairs(root):
    """Returns ``(pairs, manifest)`` for a directory written by :func:`save_pairs`."""
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    pairs = []
    for entry in manifest["pairs"]:
        kw = {}
        for key, rel in entry["files"].items():
            kw[key] = _PAIR_FILES[key][2](root / rel)
        kw["fixed"] = kw["fixed"].astype(np.float64)
        kw["moving"] = kw["moving"].astype(np.float64)
        if kw.get("gt_field") is not None:
            kw["gt_field"] = kw["gt_field"].astype(np.float64)
        pairs.append(RegistrationPair(name=entry["name"], **kw))
    return pairs, manifest
