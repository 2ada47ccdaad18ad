"""Dynamically scaled shrinkage loss, certainty targets and baseline losses.

Every loss returns a :class:`LossOutput` holding the scalar value, the local
(per element) loss and the analytic gradient with respect to the prediction.
Reduction convention for all losses: sum over the channel axis, mean over the
batch and spatial axes (``value * B*H*W == per_element.sum()``).

Batch statistics that the training graph treats as constants (the mean
absolute error used for normalisation and the certainty target) are passed in
explicitly through :class:`ErrorStats`; the gradients never flow through them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit

from .grid import grid_reduce_mean

LN_HALF = math.log(0.5)
FOCAL_CLAMP = 1e-7


@dataclass(frozen=True)
class LossParams:
    a: float = 20.0
    c: float = 0.5
    eps: float = 1e-7
    dynamic_scaling: bool = True
    # non-default: divide by B*H*W*K instead of B*H*W
    channel_mean: bool = False

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError("modulation steepness a must be > 0")
        if not self.eps > 0:
            raise ValueError("eps must be > 0")

    def static(self) -> "LossParams":
        return replace(self, dynamic_scaling=False)


@dataclass(frozen=True)
class ErrorStats:
    mean_abs: float

    def __post_init__(self):
        if not self.mean_abs >= 0:
            raise ValueError("mean absolute error must be >= 0")


@dataclass
class LossOutput:
    value: float
    per_element: np.ndarray
    grad: np.ndarray


def _pair(y, y_hat):
    y = np.asarray(y)
    y_hat = np.asarray(y_hat)
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {y_hat.shape}")
    return y, y_hat


def _pixel_mask(mask, shape):
    """Broadcast an optional (B,H,W[,1]) mask against a (B,H,W,K) grid."""
    if mask is None:
        return None
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim == len(shape) - 1:
        m = m[..., None]
    if m.shape[:-1] != tuple(shape[:-1]) or m.shape[-1] not in (1, shape[-1]):
        raise ValueError(f"mask shape {m.shape} incompatible with {shape}")
    return m


def _reduce(per_element, mask, p: LossParams | None = None):
    """Return (value, divisor) under the sum-K / mean-BHW convention."""
    shape = per_element.shape
    k = shape[-1]
    if mask is None:
        n_pix = float(np.prod(shape[:-1]))
        total = float(np.sum(per_element, dtype=np.float64))
    else:
        n_pix = float(np.sum(mask[..., 0] if mask.shape[-1] == 1 else mask.max(-1)))
        total = float(np.sum(per_element * mask, dtype=np.float64))
    if p is not None and p.channel_mean:
        n_pix *= k
    if n_pix == 0:
        return 0.0, 1.0
    return total / n_pix, n_pix


def abs_error(y, y_hat) -> np.ndarray:
    y, y_hat = _pair(y, y_hat)
    return np.abs(y - y_hat)


def error_stats(l, mask=None) -> ErrorStats:
    """Batch mean absolute error, optionally over the masked pixels only."""
    l = np.asarray(l)
    if mask is None:
        return ErrorStats(grid_reduce_mean(l))
    m = _pixel_mask(mask, l.shape)
    m = np.broadcast_to(m, l.shape)
    count = float(m.sum())
    if count == 0:
        return ErrorStats(0.0)
    return ErrorStats(float(np.sum(l * m, dtype=np.float64) / count))


def normalize_errors(l, stats: ErrorStats, p: LossParams) -> np.ndarray:
    return np.asarray(l) / (2.0 * stats.mean_abs + p.eps)


def shrinkage_modulation(l, p: LossParams):
    # expit(a(l-c)) == 1/(1+exp(a(c-l))) without overflow
    out = expit(p.a * (np.asarray(l, dtype=np.float64) - p.c))
    return float(out) if np.ndim(out) == 0 else out


def dssl(y, y_hat, p: LossParams = LossParams(), mask=None,
         stats: ErrorStats | None = None) -> LossOutput:
    """Dynamically scaled shrinkage loss.

    ``mask`` (shape ``(B,H,W)``) restricts both the batch statistic and the
    reduction to the selected pixels.  ``stats`` overrides the batch mean
    absolute error; gradient checks pass the unperturbed value here.
    """
    y, y_hat = _pair(y, y_hat)
    m = _pixel_mask(mask, y.shape)
    diff = y_hat.astype(np.float64) - y
    l = np.abs(diff)
    if p.dynamic_scaling:
        if stats is None:
            stats = error_stats(l, mask)
        scale = 1.0 / (2.0 * stats.mean_abs + p.eps)
    else:
        scale = 1.0
    n = l * scale
    s = expit(p.a * (n - p.c))
    per = n * s
    value, n_pix = _reduce(per, m, p)
    dper_dn = s + n * p.a * s * (1.0 - s)
    grad = dper_dn * scale * np.sign(diff) / n_pix
    if m is not None:
        grad = grad * m
    return LossOutput(value, per.astype(y_hat.dtype, copy=False),
                      grad.astype(y_hat.dtype, copy=False))


def central_difference(fn, x, h: float, indices=None) -> np.ndarray:
    """Central finite differences of the scalar ``fn`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = fn(x)
        flat[i] = old - h
        fm = fn(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def max_relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Largest |a-n| / max(|a|, |n|), ignoring entries below ``floor`` of the
    gradient scale (finite differences cannot resolve them)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(n), initial=0.0))
    if scale == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor * scale)
    return float(np.max(np.abs(a - n) / denom))


def dssl_grad_check(y, y_hat, p: LossParams = LossParams(), h: float = 1e-4,
                    mask=None) -> float:
    if not h > 0:
        raise ValueError("step must be > 0")
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    stats = error_stats(np.abs(y - y_hat), mask) if p.dynamic_scaling else None
    analytic = dssl(y, y_hat, p, mask, stats).grad
    numeric = central_difference(lambda v: dssl(y, v, p, mask, stats).value, y_hat, h)
    return max_relative_error(analytic, numeric)


def certainty(l, stats: ErrorStats, p: LossParams = LossParams()) -> np.ndarray:
    """Map errors to (0, 1]: 1 at zero error, 0.5 at the batch mean error."""
    l = np.asarray(l, dtype=np.float64)
    if np.any(l < 0):
        raise ValueError("errors must be non-negative")
    return np.exp(l / (stats.mean_abs + p.eps) * LN_HALF)


def scale_relative_error(l, scale) -> np.ndarray:
    scale = np.asarray(scale, dtype=np.float64)
    if np.any(scale <= 0):
        raise ValueError("object scale must be positive")
    return np.asarray(l) / scale


# -- baselines -------------------------------------------------------------

@dataclass(frozen=True)
class L2:
    pass


@dataclass(frozen=True)
class L1:
    pass


@dataclass(frozen=True)
class SmoothL1:
    beta: float = 1.0


@dataclass(frozen=True)
class Focal:
    alpha: float = 0.25
    gamma: float = 2.0


@dataclass(frozen=True)
class Shrinkage:
    a: float = 10.0
    c: float = 0.2


@dataclass(frozen=True)
class ReducedFocal:
    gamma: float = 2.0
    threshold: float = 0.5


def _focal_terms(y, y_hat):
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("focal losses need binary targets")
    clipped = (y_hat > FOCAL_CLAMP) & (y_hat < 1 - FOCAL_CLAMP)
    p = np.clip(y_hat, FOCAL_CLAMP, 1 - FOCAL_CLAMP)
    pt = np.where(y == 1, p, 1 - p)
    dpt = np.where(y == 1, 1.0, -1.0) * clipped
    return pt, dpt


def baseline_losses(y, y_hat, kind) -> LossOutput:
    y, y_hat = _pair(y, y_hat)
    y = y.astype(np.float64)
    y_hat64 = y_hat.astype(np.float64)
    x = y_hat64 - y
    ax = np.abs(x)
    if isinstance(kind, L2):
        per, grad = 0.5 * x * x, x
    elif isinstance(kind, L1):
        per, grad = ax, np.sign(x)
    elif isinstance(kind, SmoothL1):
        quad = ax < kind.beta
        per = np.where(quad, 0.5 * x * x / kind.beta, ax - 0.5 * kind.beta)
        grad = np.where(quad, x / kind.beta, np.sign(x))
    elif isinstance(kind, Shrinkage):
        s = expit(kind.a * (ax - kind.c))
        per = ax * ax * s
        grad = (2 * ax * s + ax * ax * kind.a * s * (1 - s)) * np.sign(x)
    elif isinstance(kind, Focal):
        pt, dpt = _focal_terms(y, y_hat64)
        at = np.where(y == 1, kind.alpha, 1 - kind.alpha)
        g = kind.gamma
        per = -at * (1 - pt) ** g * np.log(pt)
        dper_dpt = at * (g * (1 - pt) ** (g - 1) * np.log(pt) - (1 - pt) ** g / pt)
        grad = dper_dpt * dpt
    elif isinstance(kind, ReducedFocal):
        pt, dpt = _focal_terms(y, y_hat64)
        g, th = kind.gamma, kind.threshold
        low = pt < th
        w = np.where(low, 1.0, (1 - pt) ** g / th ** g)
        dw = np.where(low, 0.0, -g * (1 - pt) ** (g - 1) / th ** g)
        per = -w * np.log(pt)
        grad = (-dw * np.log(pt) - w / pt) * dpt
    else:
        raise ValueError(f"unknown loss kind: {kind!r}")
    value, n_pix = _reduce(per, None)
    return LossOutput(value, per.astype(y_hat.dtype, copy=False),
                      (grad / n_pix).astype(y_hat.dtype, copy=False))


def symmetry_min_loss(y_variants, y_hat, p: LossParams = LossParams(), mask=None):
    """Evaluate DSSL against each equivalent ground truth and keep the smallest.

    Returns ``(LossOutput, chosen_index)``; the gradient is that of the chosen
    variant only.  Ties resolve to the lowest index.
    """
    y_variants = list(y_variants)
    if not y_variants:
        raise ValueError("need at least one ground-truth variant")
    best, best_i = None, -1
    for i, y in enumerate(y_variants):
        out = dssl(y, y_hat, p, mask)
        if best is None or out.value < best.value:
            best, best_i = out, i
    return best, best_i
