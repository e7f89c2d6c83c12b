"""Dense grids: scalar volumes, displacement fields and label masks.

Arrays are plain numpy arrays:

* volume: shape ``dims``, float
* field: shape ``dims + (D,)`` with ``D == len(dims)``; channel ``k`` is the
  displacement along axis ``k`` in voxels (interleaved layout, the vector of
  one voxel is contiguous)
* mask: shape ``dims``, non-negative integers, 0 is background

On disk every grid is a JSON header ``<name>.vol.json`` next to a raw
little-endian payload ``<name>.vol.raw`` (f32 for volumes and fields, u16 for
masks).
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

HEADER_SUFFIX = ".vol.json"
PAYLOAD_SUFFIX = ".vol.raw"

_DTYPES = {"f32": np.dtype("<f4"), "u16": np.dtype("<u2")}


class GridFormatError(ValueError):
    """Raised for malformed headers, truncated payloads or invalid samples."""


# ---------------------------------------------------------------------------
# validation


def as_volume(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim < 1:
        raise ValueError("volume must have at least one axis")
    if not np.all(np.isfinite(v)):
        raise ValueError("volume contains non-finite samples")
    return v


def as_field(u) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if u.ndim < 2 or u.shape[-1] != u.ndim - 1:
        raise ValueError(
            f"field must have shape dims + (len(dims),), got {u.shape}")
    if not np.all(np.isfinite(u)):
        raise ValueError("field contains non-finite samples")
    return u


def zero_field(dims) -> np.ndarray:
    dims = tuple(int(d) for d in dims)
    return np.zeros(dims + (len(dims),))


def identity_grid(dims) -> np.ndarray:
    """Voxel coordinates as a field-shaped array."""
    axes = [np.arange(d, dtype=np.float64) for d in dims]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


# ---------------------------------------------------------------------------
# file I/O


def _base(path) -> Path:
    p = str(path)
    for suffix in (HEADER_SUFFIX, PAYLOAD_SUFFIX):
        if p.endswith(suffix):
            p = p[: -len(suffix)]
            break
    return Path(p)


def grid_paths(path) -> tuple[Path, Path]:
    """Header and payload paths for a grid file name (with or without suffix)."""
    base = _base(path)
    return (base.with_name(base.name + HEADER_SUFFIX),
            base.with_name(base.name + PAYLOAD_SUFFIX))


def _write(path, data: np.ndarray, header: dict, dtype: str) -> None:
    hdr_path, raw_path = grid_paths(path)
    hdr_path.parent.mkdir(parents=True, exist_ok=True)
    payload = np.ascontiguousarray(data, dtype=_DTYPES[dtype])
    raw_path.write_bytes(payload.tobytes(order="C"))
    header = dict(header, dtype=dtype, order="row-major")
    hdr_path.write_text(json.dumps(header, sort_keys=True) + "\n")


def _read(path, dtype: str, want_channels: bool):
    hdr_path, raw_path = grid_paths(path)
    try:
        header = json.loads(hdr_path.read_text())
    except json.JSONDecodeError as exc:
        raise GridFormatError(f"{hdr_path}: malformed header: {exc}") from exc
    if not isinstance(header, dict):
        raise GridFormatError(f"{hdr_path}: header must be a JSON object")
    dims = header.get("dims")
    if (not isinstance(dims, list) or not dims
            or not all(isinstance(d, int) and not isinstance(d, bool) and d > 0
                       for d in dims)):
        raise GridFormatError(f"{hdr_path}: 'dims' must be a list of positive ints")
    if header.get("dtype") != dtype:
        raise GridFormatError(
            f"{hdr_path}: expected dtype {dtype!r}, got {header.get('dtype')!r}")
    if header.get("order", "row-major") != "row-major":
        raise GridFormatError(f"{hdr_path}: only row-major order is supported")
    shape = tuple(dims)
    if want_channels:
        channels = header.get("channels")
        if channels != len(dims):
            raise GridFormatError(
                f"{hdr_path}: 'channels' must equal the number of axes ({len(dims)})")
        shape = shape + (channels,)
    elif "channels" in header:
        raise GridFormatError(f"{hdr_path}: unexpected 'channels' key")

    raw = raw_path.read_bytes()
    dt = _DTYPES[dtype]
    expected = math.prod(shape) * dt.itemsize
    if len(raw) < expected:
        raise GridFormatError(
            f"{raw_path}: truncated payload ({len(raw)} of {expected} bytes)")
    if len(raw) > expected:
        raise GridFormatError(
            f"{raw_path}: payload has {len(raw) - expected} trailing bytes")
    data = np.frombuffer(raw, dtype=dt).reshape(shape)
    if dt.kind == "f" and not np.all(np.isfinite(data)):
        raise GridFormatError(f"{raw_path}: payload contains non-finite samples")
    return data.astype(dt.newbyteorder("="))


def write_volume(v, path) -> None:
    v = np.asarray(v)
    if not np.all(np.isfinite(v)):
        raise GridFormatError("refusing to write non-finite volume")
    _write(path, v, {"dims": list(v.shape)}, "f32")


def read_volume(path) -> np.ndarray:
    """Read a volume; samples come back as float32 exactly as stored."""
    return _read(path, "f32", want_channels=False)


def write_field(u, path) -> None:
    u = np.asarray(u)
    if u.ndim < 2 or u.shape[-1] != u.ndim - 1:
        raise GridFormatError(f"not a displacement field: shape {u.shape}")
    if not np.all(np.isfinite(u)):
        raise GridFormatError("refusing to write non-finite field")
    _write(path, u, {"dims": list(u.shape[:-1]), "channels": u.shape[-1]}, "f32")


def read_field(path) -> np.ndarray:
    return _read(path, "f32", want_channels=True)


def write_mask(mask, path) -> None:
    mask = np.asarray(mask)
    if mask.dtype.kind not in "iub":
        raise GridFormatError("label mask must be integer valued")
    if mask.size and (mask.min() < 0 or mask.max() > np.iinfo(np.uint16).max):
        raise GridFormatError("labels must lie in [0, 65535]")
    _write(path, mask, {"dims": list(mask.shape)}, "u16")


def read_mask(path) -> np.ndarray:
    return _read(path, "u16", want_channels=False)


# ---------------------------------------------------------------------------
# resolution changes
#
# Both directions use the cell-centred convention: fine coordinate x and
# coarse coordinate q are related by (x + 0.5) = s * (q + 0.5) with
# s = n_fine / n_coarse, so affine fields survive a round trip exactly away
# from the outermost voxels.


def _interp_matrix(n_out: int, n_in: int, positions: np.ndarray) -> np.ndarray:
    """Row i linearly interpolates an ``n_in`` signal at ``positions[i]``."""
    pos = np.clip(positions, 0.0, n_in - 1)
    mat = np.zeros((n_out, n_in))
    if n_in == 1:
        mat[:, 0] = 1.0
        return mat
    i0 = np.minimum(np.floor(pos).astype(int), n_in - 2)
    t = pos - i0
    rows = np.arange(n_out)
    mat[rows, i0] += 1.0 - t
    mat[rows, i0 + 1] += t
    return mat


def _upsample_matrix(n_fine: int, n_coarse: int) -> np.ndarray:
    s = n_fine / n_coarse
    q = (np.arange(n_fine) + 0.5) / s - 0.5
    return _interp_matrix(n_fine, n_coarse, q)


def _downsample_matrix(n_fine: int, n_coarse: int) -> np.ndarray:
    s = n_fine / n_coarse
    x = (np.arange(n_coarse) + 0.5) * s - 0.5
    return _interp_matrix(n_coarse, n_fine, x)


def _apply_separable(u: np.ndarray, mats) -> np.ndarray:
    out = u
    for axis, mat in enumerate(mats):
        out = np.moveaxis(np.tensordot(mat, out, axes=([1], [axis])), 0, axis)
    return out


def coarse_dims(dims, factor: int = 2) -> tuple[int, ...]:
    return tuple(-(-int(d) // factor) for d in dims)


def downsample_field(u, factor: int = 2) -> np.ndarray:
    """Restrict a field to a grid ``factor`` times coarser (extents rounded up).

    Displacements are rescaled so they stay expressed in coarse voxels.
    """
    u = as_field(u)
    dims = u.shape[:-1]
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if min(dims) < 2:
        raise ValueError(f"every extent must be >= 2 to downsample, got {dims}")
    cdims = coarse_dims(dims, factor)
    out = _apply_separable(u, [_downsample_matrix(n, c) for n, c in zip(dims, cdims)])
    scale = np.array([c / n for n, c in zip(dims, cdims)])
    return out * scale


def upsample_field(u, target_dims) -> np.ndarray:
    """Multilinear interpolation of every channel onto ``target_dims``."""
    u = as_field(u)
    dims = u.shape[:-1]
    target_dims = tuple(int(d) for d in target_dims)
    if len(target_dims) != len(dims):
        raise ValueError("target_dims must have one extent per axis")
    if any(t < d for t, d in zip(target_dims, dims)):
        raise ValueError(f"target {target_dims} is smaller than source {dims}")
    out = _apply_separable(u, [_upsample_matrix(t, d) for t, d in zip(target_dims, dims)])
    scale = np.array([t / d for t, d in zip(target_dims, dims)])
    return out * scale


def upsample_field_adjoint(g, source_dims) -> np.ndarray:
    """Adjoint of :func:`upsample_field` (maps fine gradients to the coarse grid)."""
    g = np.asarray(g, dtype=np.float64)
    dims = g.shape[:-1]
    source_dims = tuple(int(d) for d in source_dims)
    scale = np.array([t / d for t, d in zip(dims, source_dims)])
    mats = [_upsample_matrix(t, d).T for t, d in zip(dims, source_dims)]
    return _apply_separable(g * scale, mats)
