"""PSNR and SSIM for images with values in [0,1]."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for unit dynamic range.

    Identical inputs return +inf.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def _windowed_mean(img, kernel):
    win = sliding_window_view(img, kernel.shape)
    return np.tensordot(win, kernel, axes=([2, 3], [0, 1]))


def _ssim_channel(a, b, kernel, c1, c2):
    mu1 = _windowed_mean(a, kernel)
    mu2 = _windowed_mean(b, kernel)
    s11 = _windowed_mean(a * a, kernel) - mu1 * mu1
    s22 = _windowed_mean(b * b, kernel) - mu2 * mu2
    s12 = _windowed_mean(a * b, kernel) - mu1 * mu2
    num = (2 * mu1 * mu2 + c1) * (2 * s12 + c2)
    den = (mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2)
    return float(np.mean(num / den))


def ssim(a, b, window=SSIM_WINDOW, sigma=SSIM_SIGMA, k1=SSIM_K1, k2=SSIM_K2):
    """Mean structural similarity, Gaussian-weighted local statistics.

    Computed over fully valid windows, per channel, then averaged across
    channels. Dynamic range is taken as 1.0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[None]
        b = b[None]
    if a.ndim != 3:
        raise ShapeError(f"ssim: expected (C,H,W) or (H,W), got {a.shape}")
    if a.shape[1] < window or a.shape[2] < window:
        raise ShapeError(
            f"ssim: image {a.shape[1]}x{a.shape[2]} smaller than {window}x{window} window"
        )
    kernel = _gaussian_window(window, sigma)
    c1 = k1 * k1
    c2 = k2 * k2
    return float(np.mean([_ssim_channel(a[c], b[c], kernel, c1, c2) for c in range(a.shape[0])]))
