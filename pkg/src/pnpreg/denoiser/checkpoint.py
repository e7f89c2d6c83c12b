"""ConvNet checkpoints: JSON manifest + raw little-endian float64 payload."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from ..solver import AdamState
from .convnet import ConvNetParams

MANIFEST_SUFFIX = ".ckpt.json"
PAYLOAD_SUFFIX = ".ckpt.raw"
_F64 = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


def checkpoint_paths(path) -> tuple[Path, Path]:
    p = str(path)
    for suffix in (MANIFEST_SUFFIX, PAYLOAD_SUFFIX):
        if p.endswith(suffix):
            p = p[: -len(suffix)]
    base = Path(p)
    return (base.with_name(base.name + MANIFEST_SUFFIX),
            base.with_name(base.name + PAYLOAD_SUFFIX))


def save_checkpoint(path, params: ConvNetParams, meta: dict | None = None,
                    adam: AdamState | None = None) -> None:
    """``meta`` carries free-form scalars (sigma, seed, epoch, ...)."""
    man_path, raw_path = checkpoint_paths(path)
    man_path.parent.mkdir(parents=True, exist_ok=True)
    arrays = params.arrays()
    manifest = {
        "format": "pnpreg-convnet",
        "dtype": "f64",
        "layers": [{"weight": list(w.shape), "bias": list(b.shape)}
                   for w, b in zip(params.weights, params.biases)],
        "meta": meta or {},
        "adam": None,
    }
    if adam is not None:
        arrays = arrays + list(adam.m) + list(adam.v)
        manifest["adam"] = {"t": adam.t, "beta1": adam.beta1,
                            "beta2": adam.beta2, "eps": adam.eps}
    payload = b"".join(np.ascontiguousarray(a, dtype=_F64).tobytes() for a in arrays)
    raw_path.write_bytes(payload)
    man_path.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")


def load_checkpoint(path):
    """Returns ``(params, meta, adam_state_or_None)``."""
    man_path, raw_path = checkpoint_paths(path)
    try:
        manifest = json.loads(man_path.read_text())
        layers = manifest["layers"]
        shapes = []
        for layer in layers:
            shapes += [tuple(layer["weight"]), tuple(layer["bias"])]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{man_path}: malformed manifest: {exc}") from exc
    if manifest.get("dtype") != "f64":
        raise CheckpointError(f"{man_path}: unsupported dtype {manifest.get('dtype')!r}")
    adam_meta = manifest.get("adam")
    n_param = len(shapes)
    if adam_meta is not None:
        shapes = shapes + shapes[:n_param] + shapes[:n_param]
    raw = raw_path.read_bytes()
    sizes = [math.prod(s) for s in shapes]
    if len(raw) != sum(sizes) * _F64.itemsize:
        raise CheckpointError(
            f"{raw_path}: payload has {len(raw)} bytes, expected {sum(sizes) * _F64.itemsize}")
    flat = np.frombuffer(raw, dtype=_F64).astype(np.float64)
    if not np.all(np.isfinite(flat)):
        raise CheckpointError(f"{raw_path}: non-finite values")
    arrays, pos = [], 0
    for shape, size in zip(shapes, sizes):
        arrays.append(flat[pos:pos + size].reshape(shape).copy())
        pos += size
    params = ConvNetParams.from_arrays(arrays[:n_param])
    adam = None
    if adam_meta is not None:
        adam = AdamState(m=arrays[n_param:2 * n_param], v=arrays[2 * n_param:],
                         t=int(adam_meta["t"]), beta1=adam_meta["beta1"],
                         beta2=adam_meta["beta2"], eps=adam_meta["eps"])
    return params, manifest.get("meta", {}), adam
