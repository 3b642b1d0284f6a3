"""Reconstruction quality metrics over ``(T, 3, H, W)`` videos in [0, 1]."""
from __future__ import annotations

import numpy as np
from scipy.ndimage import convolve1d

from .errors import ConfigurationError

PSNR_CAP_DB = 100.0

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


def _check_pair(a: np.ndarray, b: np.ndarray):
    if a.ndim != 4 or b.ndim != 4:
        raise ConfigurationError("videos must be (T, 3, H, W) arrays")
    if a.shape != b.shape:
        raise ConfigurationError(f"video shapes differ: {a.shape} vs {b.shape}")


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for unit-range videos, capped at 100 dB."""
    _check_pair(a, b)
    mse = float(np.mean(np.square(a.astype(np.float64) - b.astype(np.float64))))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = size // 2
    w = np.exp(-0.5 * (np.arange(-r, r + 1, dtype=np.float64) / sigma) ** 2)
    return w / w.sum()


def _filter_valid(x: np.ndarray, win: np.ndarray) -> np.ndarray:
    """Separable 2-D window filter over the last two axes, valid region only."""
    r = len(win) // 2
    y = convolve1d(x, win, axis=-2, mode="constant")
    y = convolve1d(y, win, axis=-1, mode="constant")
    return y[..., r:-r, r:-r]


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity with the standard 11x11 Gaussian window.

    Computed on the channel-mean (luma-equivalent) image with sigma 1.5,
    K1 = 0.01, K2 = 0.03 and dynamic range 1, averaged over all windows of
    all frames.  Frames smaller than the window fall back to whole-frame
    statistics (one window per frame).
    """
    _check_pair(a, b)
    x = a.astype(np.float64).mean(axis=1)
    y = b.astype(np.float64).mean(axis=1)
    c1 = _SSIM_K1**2
    c2 = _SSIM_K2**2

    t, h, w = x.shape
    if h < _SSIM_WINDOW or w < _SSIM_WINDOW:
        mx = x.mean(axis=(1, 2))
        my = y.mean(axis=(1, 2))
        vx = x.var(axis=(1, 2))
        vy = y.var(axis=(1, 2))
        cov = ((x - mx[:, None, None]) * (y - my[:, None, None])).mean(axis=(1, 2))
    else:
        win = _gaussian_window(_SSIM_WINDOW, _SSIM_SIGMA)
        mx = _filter_valid(x, win)
        my = _filter_valid(y, win)
        vx = _filter_valid(x * x, win) - mx * mx
        vy = _filter_valid(y * y, win) - my * my
        cov = _filter_valid(x * y, win) - mx * my

    num = (2.0 * mx * my + c1) * (2.0 * cov + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))
