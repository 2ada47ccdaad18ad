"""Bounded distance transform ground truth from instance id-maps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .grid import binary_mask


@dataclass(frozen=True)
class BdtParams:
    s: float = 8.0

    def __post_init__(self):
        if not self.s > 0:
            raise ValueError("BDT scale s must be > 0")


def as_idmap(idmap) -> np.ndarray:
    idmap = np.asarray(idmap)
    if idmap.ndim != 2:
        raise ValueError("id-map must be 2-D")
    if not np.issubdtype(idmap.dtype, np.integer):
        if np.any(idmap != np.round(idmap)):
            raise ValueError("id-map must hold integer ids")
        idmap = idmap.astype(np.int64)
    if np.any(idmap < 0):
        raise ValueError("ids must be non-negative")
    return idmap


def instance_boundaries(idmap) -> np.ndarray:
    """Pixels with a nonzero Sobel response on the raw id values.

    Replicated borders keep the image frame itself from counting as a
    boundary.  Transitions are two pixels thick (one on each side).
    """
    ids = as_idmap(idmap).astype(np.float64)
    gx = ndimage.sobel(ids, axis=1, mode="nearest")
    gy = ndimage.sobel(ids, axis=0, mode="nearest")
    return binary_mask(np.hypot(gx, gy) != 0)


def _lower_envelope_1d(f: np.ndarray) -> np.ndarray:
    """Exact 1-D squared distance transform of the sampled function ``f``.

    Lower envelope of the parabolas ``(x - q)^2 + f[q]`` (Felzenszwalb and
    Huttenlocher).  Infinite samples are skipped.
    """
    n = f.shape[0]
    out = np.empty(n, dtype=np.float64)
    finite = np.flatnonzero(np.isfinite(f))
    if finite.size == 0:
        out.fill(np.inf)
        return out
    v = np.empty(finite.size, dtype=np.int64)
    z = np.empty(finite.size + 1, dtype=np.float64)
    k = 0
    v[0] = finite[0]
    z[0], z[1] = -np.inf, np.inf
    for q in finite[1:]:
        fq = f[q] + q * q
        # z[0] is -inf, so k never drops below 0
        s = (fq - (f[v[k]] + v[k] * v[k])) / (2.0 * (q - v[k]))
        while s <= z[k]:
            k -= 1
            s = (fq - (f[v[k]] + v[k] * v[k])) / (2.0 * (q - v[k]))
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for x in range(n):
        while z[k + 1] < x:
            k += 1
        d = x - v[k]
        out[x] = d * d + f[v[k]]
    return out


def squared_edt(boundary) -> np.ndarray:
    """Exact squared Euclidean distance to the nearest nonzero pixel."""
    b = binary_mask(boundary)
    f = np.where(b == 1, 0.0, np.inf)
    cols = np.empty_like(f)
    for j in range(f.shape[1]):
        cols[:, j] = _lower_envelope_1d(f[:, j])
    out = np.empty_like(f)
    for i in range(f.shape[0]):
        out[i] = _lower_envelope_1d(cols[i])
    return out


def euclidean_distance_transform(boundary) -> np.ndarray:
    """Distance in pixels to the nearest boundary pixel.

    With no boundary pixel at all every entry is the sentinel ``H + W``.
    """
    b = binary_mask(boundary)
    h, w = b.shape
    if not b.any():
        return np.full((h, w), float(h + w), dtype=np.float32)
    return np.sqrt(squared_edt(b)).astype(np.float32)


def bounded_distance_transform(idmap, p: BdtParams = BdtParams()) -> np.ndarray:
    idmap = as_idmap(idmap)
    d = euclidean_distance_transform(instance_boundaries(idmap))
    out = np.tanh(d.astype(np.float64) / p.s)
    out[idmap == 0] = 0.0
    return out.astype(np.float32)


def disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return (xx * xx + yy * yy) <= r * r


FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


def instance_masks_from_bdt(bdt, threshold: float = 0.5, dilation_radius: int = 2) -> list:
    """Threshold a BDT map, split it into 4-connected blobs and grow each back."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    if dilation_radius < 0:
        raise ValueError("dilation radius must be >= 0")
    bdt = np.asarray(bdt)
    labels, count = ndimage.label(bdt >= threshold, structure=FOUR_CONNECTED)
    masks = []
    for i in range(1, count + 1):
        m = labels == i
        if dilation_radius > 0:
            m = ndimage.binary_dilation(m, structure=disk(dilation_radius))
        masks.append(m.astype(np.uint8))
    return masks
