"""Reconstruction quality: MSE, PSNR and a block SSIM."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class QualityReport:
    mse: float
    psnr: float
    ssim: float


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, peak: float = 1.0) -> float:
    """10 log10(peak^2 / mse); identical inputs give +inf."""
    e = mse(a, b)
    if e == 0:
        return float("inf")
    return float(10.0 * np.log10(peak**2 / e))


def _window_ssim(x, y, c1, c2) -> float:
    mx, my = x.mean(), y.mean()
    vx, vy = x.var(), y.var()
    cov = ((x - mx) * (y - my)).mean()
    return ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))


def ssim(a, b, peak: float = 1.0, window: int = 8) -> float:
    """Mean SSIM over non-overlapping window x window blocks of the channel-mean image.

    Images smaller than one window are compared as a single global window.
    """
    a, b = _pair(a, b)
    if a.ndim == 3:
        a, b = a.mean(axis=2), b.mean(axis=2)
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    h, w = a.shape
    if h < window or w < window:
        return float(_window_ssim(a, b, c1, c2))
    vals = [
        _window_ssim(a[i : i + window, j : j + window], b[i : i + window, j : j + window], c1, c2)
        for i in range(0, h - window + 1, window)
        for j in range(0, w - window + 1, window)
    ]
    return float(np.mean(vals))


def quality(x_star, x0, peak: float = 1.0) -> QualityReport:
    return QualityReport(mse(x_star, x0), psnr(x_star, x0, peak), ssim(x_star, x0, peak))
