"""Mesh and image file formats: OBJ subset, PFM, 16-bit PNG depth, PNG masks."""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import TriangleMesh
from .validation import InputError


def write_obj(mesh: TriangleMesh, path) -> None:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> TriangleMesh:
    """Read ``v`` and ``f`` records; polygons are fan-triangulated, other records ignored."""
    verts, tris = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
                if len(verts[-1]) != 3:
                    raise ValueError("vertex needs 3 coordinates")
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                if len(idx) < 3:
                    raise ValueError("face needs at least 3 vertices")
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                tris.extend((idx[0], idx[k], idx[k + 1]) for k in range(1, len(idx) - 1))
        except ValueError as exc:
            raise InputError(f"{path}:{lineno}: {exc}") from None
    if not tris:
        raise InputError(f"{path}: no faces")
    return TriangleMesh(np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(tris))


def write_pfm(image: np.ndarray, path) -> None:
    """Single-channel little-endian PFM; NaN is stored as-is."""
    img = np.asarray(image, dtype="<f4")
    if img.ndim != 2:
        raise InputError("PFM writer supports single-channel images only")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{w} {h}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.flipud(img).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header != b"Pf":
            raise InputError(f"{path}: not a single-channel PFM (header {header!r})")
        try:
            w, h = (int(x) for x in fh.readline().split())
            scale = float(fh.readline().strip())
        except ValueError:
            raise InputError(f"{path}: malformed PFM header") from None
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(), dtype=dtype)
    if data.size != w * h:
        raise InputError(f"{path}: expected {w * h} samples, found {data.size}")
    return np.flipud(data.reshape(h, w)).astype(np.float32)


def write_depth_png(depth: np.ndarray, path) -> None:
    """16-bit PNG in millimeters, 0 = missing."""
    d = np.asarray(depth, dtype=np.float64)
    mm = np.where(np.isfinite(d) & (d > 0), np.round(d * 1000.0), 0)
    if mm.max(initial=0) > 65535:
        raise InputError("depth exceeds 65.535 m and cannot be stored as 16-bit millimeters")
    Image.fromarray(mm.astype(np.uint16)).save(path)


def read_depth_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path)).astype(np.float64)
    if arr.ndim != 2:
        raise InputError(f"{path}: depth PNG must be single channel")
    return np.where(arr > 0, arr / 1000.0, np.nan)


def read_depth(path) -> np.ndarray:
    """Load a depth image (PFM meters or PNG millimeters) as float64 with NaN missing."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: file not found")
    if path.suffix.lower() == ".pfm":
        d = read_pfm(path).astype(np.float64)
        d[~(d > 0)] = np.nan
        return d
    if path.suffix.lower() == ".png":
        return read_depth_png(path)
    if path.suffix.lower() == ".npy":
        return np.load(path).astype(np.float64)
    raise InputError(f"{path}: unsupported depth format")


def write_mask(mask: np.ndarray, path) -> None:
    Image.fromarray(np.asarray(mask, dtype=np.uint8) * 255).save(path)


def read_mask(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: mask file not found")
    arr = np.asarray(Image.open(path))
    if arr.ndim != 2:
        raise InputError(f"{path}: mask must be single channel")
    return arr > 127


def read_float_map(path) -> np.ndarray:
    """Per-pixel float map (PFM or .npy)."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: file not found")
    if path.suffix.lower() == ".pfm":
        return read_pfm(path).astype(np.float64)
    if path.suffix.lower() == ".npy":
        return np.load(path).astype(np.float64)
    raise InputError(f"{path}: unsupported map format")


if sys.byteorder != "little":  # pragma: no cover
    raise ImportError("PFM writer assumes a little-endian host")
