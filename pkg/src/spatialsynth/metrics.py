"""PSNR and SSIM for images and clips."""

from __future__ import annotations

import math

import numpy as np

#: returned by :func:`psnr` when the inputs are identical
PSNR_IDENTICAL = math.inf


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in decibels, over all elements.

    Identical inputs give :data:`PSNR_IDENTICAL` (``inf``).
    """
    if peak <= 0:
        raise ValueError("peak must be positive")
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(peak * peak / mse)


def _box_mean(x: np.ndarray, win: int) -> np.ndarray:
    # mean over every full win x win window of the two leading axes
    c = np.cumsum(np.cumsum(x, axis=0), axis=1)
    c = np.pad(c, ((1, 0), (1, 0)) + ((0, 0),) * (x.ndim - 2))
    s = c[win:, win:] - c[:-win, win:] - c[win:, :-win] + c[:-win, :-win]
    return s / (win * win)


def ssim_map(a, b, window: int = 8, peak: float = 1.0, k1: float = 0.01, k2: float = 0.03) -> np.ndarray:
    """Local SSIM for every full ``window x window`` uniform window.

    Inputs are ``(H, W)`` or ``(H, W, C)``; the result has shape
    ``(H - window + 1, W - window + 1[, C])``.  Statistics use population
    (1/n) moments.
    """
    a, b = _pair(a, b)
    if a.ndim not in (2, 3):
        raise ValueError("ssim expects (H, W) or (H, W, C) images")
    if window > a.shape[0] or window > a.shape[1] or window < 1:
        raise ValueError(f"window {window} does not fit image {a.shape[:2]}")
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    mu_a = _box_mean(a, window)
    mu_b = _box_mean(b, window)
    var_a = _box_mean(a * a, window) - mu_a * mu_a
    var_b = _box_mean(b * b, window) - mu_b * mu_b
    cov = _box_mean(a * b, window) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, window: int = 8, peak: float = 1.0, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean local SSIM; clips ``(N, H, W[, C])`` average over frames."""
    a, b = _pair(a, b)
    if np.array_equal(a, b):
        return 1.0
    if a.ndim == 4 or (a.ndim == 3 and a.shape[-1] not in (1, 3, 4)):
        return float(np.mean([ssim(x, y, window, peak, k1, k2) for x, y in zip(a, b)]))
    return float(np.mean(ssim_map(a, b, window, peak, k1, k2)))


def masked_ssim(a, b, mask, window: int = 8, peak: float = 1.0) -> float:
    """SSIM restricted to a region.

    Both images are zeroed outside ``mask`` and local SSIM is averaged over
    the windows that touch the region.  Clips average over frames that have
    a non-empty mask; NaN when the mask is empty everywhere.
    """
    a, b = _pair(a, b)
    mask = np.asarray(mask, dtype=bool)
    if a.ndim == 4:
        vals = [masked_ssim(x, y, m, window, peak) for x, y, m in zip(a, b, mask)]
        vals = [v for v in vals if not math.isnan(v)]
        return float(np.mean(vals)) if vals else math.nan
    m = mask.astype(np.float64)
    if not m.any():
        return math.nan
    mc = m[..., None] if a.ndim == 3 else m
    smap = ssim_map(a * mc, b * mc, window, peak)
    touched = _box_mean(m, window) > 0
    if smap.ndim == 3:
        touched = touched[..., None] & np.ones(smap.shape, dtype=bool)
    return float(smap[touched].mean())


def mean_abs_in(a, b, mask) -> float:
    """Mean absolute difference over pixels in ``mask`` (channels averaged)."""
    a, b = _pair(a, b)
    mask = np.asarray(mask, dtype=bool)
    d = np.abs(a - b)
    if d.ndim == mask.ndim + 1:
        d = d.mean(axis=-1)
    if not mask.any():
        return 0.0
    return float(d[mask].mean())
