"""Separable resampling and Gaussian filtering on (H, W, C) float images."""
from __future__ import annotations

import math

import numpy as np

from .._kernels import filter_axis


def _cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    ax = np.abs(x)
    ax2 = ax * ax
    ax3 = ax2 * ax
    near = (a + 2) * ax3 - (a + 3) * ax2 + 1
    far = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, near, np.where(ax < 2, far, 0.0))


def _triangle(x: np.ndarray) -> np.ndarray:
    return np.maximum(0.0, 1.0 - np.abs(x))


def _box(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    return np.where(ax < 0.5, 1.0, np.where(ax == 0.5, 0.5, 0.0))


KERNELS = {
    "bicubic": (_cubic, 2.0),
    "bilinear": (_triangle, 1.0),
    "area": (_box, 0.5),
}


def resample_weights(n_in: int, n_out: int, kernel: str = "bicubic"):
    """Tap indices and normalized weights mapping n_in samples to n_out.

    Pixel centers are aligned (``src = (dst + 0.5) / scale - 0.5``). When
    shrinking, the kernel is stretched by the inverse scale so it also acts
    as the anti-alias filter. Out-of-range taps are clamped to the edge.
    """
    if n_in < 1 or n_out < 1:
        raise ValueError(f"resample sizes must be >= 1 (got {n_in} -> {n_out})")
    try:
        fn, support = KERNELS[kernel]
    except KeyError:
        raise ValueError(f"unknown resampling kernel {kernel!r}") from None
    scale = n_out / n_in
    stretch = min(scale, 1.0)
    width = support / stretch
    centers = (np.arange(n_out) + 0.5) / scale - 0.5
    taps = int(math.ceil(2 * width)) + 1
    first = np.floor(centers - width).astype(np.int64) + 1
    idx = first[:, None] + np.arange(taps)[None, :]
    wts = fn((centers[:, None] - idx) * stretch)
    wts = wts / wts.sum(axis=1, keepdims=True)
    return np.clip(idx, 0, n_in - 1), wts


def resize(img: np.ndarray, new_h: int, new_w: int, kernel: str = "bicubic", clip: bool = True) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if new_h < 1 or new_w < 1:
        raise ValueError(f"target size must be positive, got {new_h}x{new_w}")
    out = img
    if new_h != h:
        out = filter_axis(out, 0, *resample_weights(h, new_h, kernel))
    if new_w != w:
        out = filter_axis(out, 1, *resample_weights(w, new_w, kernel))
    if out is img:
        out = img.copy()
    return np.clip(out, 0.0, 1.0) if clip else out


def resize_bicubic(img: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Catmull-Rom (a = -0.5) resize with edge clamping; output clipped to [0, 1]."""
    return resize(img, new_h, new_w, "bicubic")


def gaussian_taps(sigma: float, radius: int | None = None) -> np.ndarray:
    if radius is None:
        radius = max(1, int(math.ceil(3 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _same_filter(n: int, taps: np.ndarray):
    r = len(taps) // 2
    idx = np.clip(np.arange(n)[:, None] + np.arange(-r, r + 1)[None, :], 0, n - 1)
    return idx, np.broadcast_to(taps, idx.shape)


def _valid_filter(n: int, taps: np.ndarray):
    k = len(taps)
    idx = np.arange(n - k + 1)[:, None] + np.arange(k)[None, :]
    return idx, np.broadcast_to(taps, idx.shape)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Edge-clamped separable Gaussian blur; sigma <= 0 returns a copy."""
    img = np.asarray(img, dtype=np.float64)
    if sigma <= 0:
        return img.copy()
    taps = gaussian_taps(sigma)
    out = filter_axis(img, 0, *_same_filter(img.shape[0], taps))
    return filter_axis(out, 1, *_same_filter(img.shape[1], taps))


def filter2_valid(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation over the first two axes."""
    out = filter_axis(img, 0, *_valid_filter(img.shape[0], taps))
    return filter_axis(out, 1, *_valid_filter(img.shape[1], taps))
