"""Input validation helpers shared by the estimators and the functional core."""

from __future__ import annotations

import numpy as np


class InputError(ValueError):
    """Raised for malformed or inconsistent inputs (CLI exit code 2)."""


def as_depth_array(depth) -> np.ndarray:
    """Return a float64 (H, W) depth array with NaN for missing pixels.

    Accepts a DepthImage-like object (``.depth``) or an array. Non-positive
    and non-finite values are treated as missing.
    """
    if hasattr(depth, "depth") and not isinstance(depth, np.ndarray):
        depth = depth.depth
    d = np.array(depth, dtype=np.float64, copy=True)
    if d.ndim != 2:
        raise InputError(f"depth image must be 2-D, got shape {d.shape}")
    d[~(d > 0)] = np.nan
    d[~np.isfinite(d)] = np.nan
    return d


def check_mask(mask, shape=None, name="mask") -> np.ndarray:
    m = np.asarray(mask)
    if m.dtype != bool:
        m = m.astype(bool)
    if shape is not None and m.shape != tuple(shape):
        raise InputError(f"{name} shape {m.shape} does not match {tuple(shape)}")
    return m


def check_same_shape(*arrays, names=None):
    shapes = [np.shape(a) for a in arrays]
    if len(set(shapes)) > 1:
        label = ", ".join(names) if names else "inputs"
        raise InputError(f"{label} must share a shape, got {shapes}")
    return shapes[0]


def check_probability_map(p, shape=None, name="probability map") -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if shape is not None and p.shape[: len(shape)] != tuple(shape):
        raise InputError(f"{name} shape {p.shape} does not match {tuple(shape)}")
    if np.any(~np.isfinite(p)) or p.min(initial=0) < 0 or p.max(initial=0) > 1:
        raise InputError(f"{name} values must lie in [0, 1]")
    return p
