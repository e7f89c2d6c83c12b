"""Static image exports: 8-bit PGM/PPM slices, warped grids and folding overlays."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .metrics import jacobian_map
from .warp import warp

YELLOW = (255, 255, 0)


def middle_slice(a: np.ndarray, ndim: int) -> np.ndarray:
    """2D view of a volume (or of a per-voxel RGB image): the central slice along axis 0."""
    if ndim == 2:
        return a
    if ndim == 3:
        return a[a.shape[0] // 2]
    raise ValueError(f"only 2D and 3D data can be rendered, got {ndim}D")


def to_u8(img, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if hi <= lo:
        return np.zeros(img.shape, dtype=np.uint8)
    scaled = np.clip((img - lo) / (hi - lo), 0.0, 1.0)
    return np.floor(scaled * 255.0 + 0.5).astype(np.uint8)


def write_pgm(path, img_u8: np.ndarray) -> None:
    img_u8 = np.asarray(img_u8, dtype=np.uint8)
    if img_u8.ndim != 2:
        raise ValueError("PGM images are 2D")
    h, w = img_u8.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img_u8.tobytes())


def write_ppm(path, rgb_u8: np.ndarray) -> None:
    rgb_u8 = np.asarray(rgb_u8, dtype=np.uint8)
    if rgb_u8.ndim != 3 or rgb_u8.shape[-1] != 3:
        raise ValueError("PPM images are (h, w, 3)")
    h, w = rgb_u8.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + rgb_u8.tobytes())


def read_pnm(path) -> np.ndarray:
    """Reader for the files written here (binary P5/P6, maxval 255, no comments)."""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    magic, size, maxval, payload = parts
    w, h = (int(v) for v in size.split())
    if maxval != b"255" or magic not in (b"P5", b"P6"):
        raise ValueError(f"unsupported PNM file {path}")
    channels = 3 if magic == b"P6" else 1
    img = np.frombuffer(payload, dtype=np.uint8)
    if img.size != w * h * channels:
        raise ValueError(f"truncated PNM payload in {path}")
    return img.reshape((h, w, 3) if channels == 3 else (h, w))


def write_png(path, img_u8: np.ndarray) -> None:
    from PIL import Image  # optional dependency

    Image.fromarray(np.asarray(img_u8, dtype=np.uint8)).save(path)


def grid_image(dims, spacing: int = 4) -> np.ndarray:
    """Bright lines every ``spacing`` voxels along every axis."""
    img = np.zeros(dims)
    for axis, n in enumerate(dims):
        idx = [slice(None)] * len(dims)
        idx[axis] = slice(0, n, spacing)
        img[tuple(idx)] = 1.0
    return img


def warped_grid(u, spacing: int = 4) -> np.ndarray:
    """The regular grid resampled along the field; the identity leaves it unchanged."""
    return warp(grid_image(u.shape[:-1], spacing), u)


def fold_overlay(background, u) -> np.ndarray:
    """Grey background with voxels of negative Jacobian determinant in yellow."""
    jac = jacobian_map(u)
    grey = to_u8(background)
    rgb = np.repeat(grey[..., None], 3, axis=-1)
    rgb[jac < 0] = YELLOW
    return rgb


def export_pair_images(out_dir, fixed, moving, warped, u, png: bool = False) -> list:
    """Write fixed, moving, warped, error map, warped grid and fold overlay.

    3D inputs are rendered through their central slice. Returns the written paths.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ndim = fixed.ndim
    err = np.abs(fixed - warped)
    grey = {
        "fixed": to_u8(fixed),
        "moving": to_u8(moving),
        "warped": to_u8(warped),
        "error": to_u8(err, 0.0, float(err.max()) if err.max() > 0 else 1.0),
        "grid": to_u8(warped_grid(u)),
    }
    written = []
    for name, img in grey.items():
        img = middle_slice(img, ndim)
        path = out_dir / f"{name}.pgm"
        write_pgm(path, img)
        written.append(path)
        if png:
            write_png(out_dir / f"{name}.png", img)
            written.append(out_dir / f"{name}.png")
    overlay = middle_slice(fold_overlay(warped, u), ndim)
    path = out_dir / "negjd.ppm"
    write_ppm(path, overlay)
    written.append(path)
    if png:
        write_png(out_dir / "negjd.png", overlay)
        written.append(out_dir / "negjd.png")
    return written
