"""PSNR and SSIM on 8-bit quantized images."""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import correlate1d

from .imagecore import check_image, quantize

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DATA_RANGE = 255.0


def _pair(a, b):
    a = check_image(a, name="a")
    b = check_image(b, name="b")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return quantize(a).astype(np.float64), quantize(b).astype(np.float64)


def psnr(a, b):
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    qa, qb = _pair(a, b)
    mse = np.mean((qa - qb) ** 2)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(DATA_RANGE**2 / mse)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, g):
    r = len(g) // 2
    out = correlate1d(img, g, axis=0, mode="constant")
    out = correlate1d(out, g, axis=1, mode="constant")
    return out[r:-r, r:-r]


def ssim(a, b):
    """Mean SSIM over all valid 11x11 Gaussian windows, averaged across channels."""
    qa, qb = _pair(a, b)
    h, w, c = qa.shape
    if min(h, w) < SSIM_WINDOW:
        raise ValueError(f"image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    g = gaussian_window()
    c1 = (SSIM_K1 * DATA_RANGE) ** 2
    c2 = (SSIM_K2 * DATA_RANGE) ** 2
    scores = []
    for ch in range(c):
        x, y = qa[:, :, ch], qb[:, :, ch]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


def format_db(v):
    return "inf" if math.isinf(v) else repr(float(v))
