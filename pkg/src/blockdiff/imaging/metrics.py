"""Fidelity metrics on [0, 1] float images."""
from __future__ import annotations

import math

import numpy as np

from .resample import filter2_valid, gaussian_taps


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for unit dynamic range; inf for identical images."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def ssim(a: np.ndarray, b: np.ndarray, k1: float = 0.01, k2: float = 0.03, sigma: float = 1.5, window: int = 11) -> float:
    """Gaussian-window SSIM averaged over pixels and channels.

    The window shrinks (keeping it odd) for images smaller than 11 pixels.
    """
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    side = min(window, a.shape[0], a.shape[1])
    if side % 2 == 0:
        side -= 1
    taps = gaussian_taps(sigma, radius=side // 2)
    c1 = k1 * k1
    c2 = k2 * k2
    mu_a = filter2_valid(a, taps)
    mu_b = filter2_valid(b, taps)
    saa = filter2_valid(a * a, taps) - mu_a * mu_a
    sbb = filter2_valid(b * b, taps) - mu_b * mu_b
    sab = filter2_valid(a * b, taps) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))
