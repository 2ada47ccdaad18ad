"""Dense value lattices shared by the loss, target and network code.

A grid is a plain ``float32`` numpy array of shape ``(B, H, W, K)``.  Keeping
numpy arrays (rather than a wrapper class) lets every module slice and
vectorise freely; the helpers below only add the shape and finiteness checks.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

DTYPE = np.float32


def _check_shape(shape) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4:
        raise ValueError(f"grid shape must be (B, H, W, K), got {shape}")
    if any(s < 1 for s in shape):
        raise ValueError(f"grid shape components must be >= 1, got {shape}")
    return shape


def as_grid(a, dtype=DTYPE) -> np.ndarray:
    """Validate ``a`` as a finite 4-D grid and return it as an array."""
    a = np.asarray(a, dtype=dtype)
    _check_shape(a.shape)
    if not np.all(np.isfinite(a)):
        raise ValueError("grid contains non-finite values")
    return a


def grid_new(shape, fill_value: float = 0.0, dtype=DTYPE) -> np.ndarray:
    shape = _check_shape(shape)
    if not np.isfinite(fill_value):
        raise ValueError("fill value must be finite")
    return np.full(shape, fill_value, dtype=dtype)


def grid_map2(a, b, f: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> np.ndarray:
    """Apply the elementwise ``f`` to two equally shaped grids."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    out = np.asarray(f(a, b), dtype=np.result_type(a, b))
    if out.shape != a.shape:
        raise ValueError("f must be elementwise")
    if not np.all(np.isfinite(out)):
        raise ValueError("f produced non-finite values")
    return out


def grid_reduce_mean(g) -> float:
    g = np.asarray(g)
    if g.size == 0:
        raise ValueError("cannot reduce an empty grid")
    # accumulate in float64 regardless of storage type
    return float(np.mean(g, dtype=np.float64))


def binary_mask(a) -> np.ndarray:
    """Coerce ``a`` to a ``uint8`` mask with values exactly 0 or 1."""
    a = np.asarray(a)
    if a.ndim != 2:
        raise ValueError("mask must be 2-D")
    return (a != 0).astype(np.uint8)


def depth_image(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float32)
    if a.ndim != 2:
        raise ValueError("depth image must be 2-D")
    if not np.all(np.isfinite(a)) or np.any(a < 0):
        raise ValueError("depth must be finite and non-negative")
    return a
