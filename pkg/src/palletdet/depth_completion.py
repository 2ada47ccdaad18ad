"""Depth completion for depalletizing scenes.

Large invalid regions are assumed to look through to the wall behind the
pallet and are set to the wall depth; the remaining small holes are filled
by Jacobi diffusion from their valid surroundings.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .bdt import FOUR_CONNECTED, disk
from .grid import DTYPE, depth_image

_SHIFTS = ((1, 0), (-1, 0), (0, 1), (0, -1))


@dataclass(frozen=True)
class CompletionParams:
    wall_depth: float
    large_area_px: int | None = None      # None: 2% of the image
    morph_radius: int = 2
    inpaint_iterations: int = 256

    def __post_init__(self):
        if not self.wall_depth > 0:
            raise ValueError("wall_depth must be positive")
        if self.large_area_px is not None and self.large_area_px <= 0:
            raise ValueError("large_area_px must be positive")
        if self.morph_radius <= 0 or self.inpaint_iterations <= 0:
            raise ValueError("morph_radius and inpaint_iterations must be positive")

    def area_threshold(self, shape) -> int:
        if self.large_area_px is not None:
            return int(self.large_area_px)
        return max(1, int(round(0.02 * shape[0] * shape[1])))


def _neighbour_sums(values: np.ndarray, inside: np.ndarray):
    """Sum and count of the 4-neighbours of every pixel, restricted to ``inside``."""
    h, w = values.shape
    v = np.pad(np.where(inside, values, 0.0), 1)
    m = np.pad(inside.astype(np.float64), 1)
    total = np.zeros((h, w))
    count = np.zeros((h, w))
    for dr, dc in _SHIFTS:
        sl = (slice(1 + dr, 1 + dr + h), slice(1 + dc, 1 + dc + w))
        total += v[sl]
        count += m[sl]
    return total, count


def large_region_mask(invalid: np.ndarray, p: CompletionParams) -> np.ndarray:
    """Originally invalid pixels belonging to a large closed invalid region."""
    r = p.morph_radius
    padded = np.pad(invalid, r, mode="edge")
    closed = ndimage.binary_closing(padded, structure=disk(r))[r:-r, r:-r] | invalid
    labels, n = ndimage.label(closed, structure=FOUR_CONNECTED)
    if n == 0:
        return np.zeros_like(invalid)
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    big = areas >= p.area_threshold(invalid.shape)
    big[0] = False
    return big[labels] & invalid


def diffuse_fill(depth: np.ndarray, holes: np.ndarray, iterations: int) -> np.ndarray:
    """Jacobi iterations of the discrete Laplace equation on ``holes``.

    Each hole component starts at the mean of its boundary values, so every
    iterate stays within the boundary's value range.
    """
    out = np.asarray(depth, dtype=np.float64).copy()
    if not holes.any():
        return out
    fixed = ~holes
    labels, n = ndimage.label(holes, structure=FOUR_CONNECTED)
    total, count = _neighbour_sums(out, fixed)
    lab = labels[holes]
    sums = np.bincount(lab, weights=total[holes], minlength=n + 1)
    cnts = np.bincount(lab, weights=count[holes], minlength=n + 1)
    if np.any(cnts[1:] == 0):
        raise ValueError("hole component without valid boundary")
    out[holes] = (sums / np.maximum(cnts, 1))[lab]
    everywhere = np.ones_like(holes)
    for _ in range(iterations):
        total, count = _neighbour_sums(out, everywhere)
        out[holes] = total[holes] / count[holes]
    return out


def complete_depth(depth, p: CompletionParams) -> np.ndarray:
    """Fill every zero pixel; valid pixels are returned untouched.

    ``p.wall_depth`` should lie behind every valid foreground depth.
    """
    d = depth_image(depth)
    invalid = d == 0
    if invalid.all():
        raise ValueError("depth image has no valid pixel")
    if not invalid.any():
        return d.copy()
    out = d.astype(np.float64)
    wall = large_region_mask(invalid, p)
    out[wall] = p.wall_depth
    holes = invalid & ~wall
    out = diffuse_fill(out, holes, p.inpaint_iterations)
    result = out.astype(DTYPE)
    result[~invalid] = d[~invalid]
    return result
