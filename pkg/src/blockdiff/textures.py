"""Seeded procedural textures for the toy super-resolution benchmark."""
from __future__ import annotations

import numpy as np

SUPERSAMPLE = 4


def _colors(rng, k):
    return rng.uniform(0.05, 0.95, size=(k, 3))


def _grid(size):
    s = SUPERSAMPLE * size
    c = (np.arange(s) + 0.5) / SUPERSAMPLE
    return np.meshgrid(c, c, indexing="ij")  # (y, x) in pixel units


def _stripes(rng, y, x):
    theta = rng.uniform(0, np.pi)
    period = rng.uniform(5.0, 16.0)
    duty = rng.uniform(0.3, 0.7)
    u = (x * np.cos(theta) + y * np.sin(theta)) / period + rng.uniform()
    return (u % 1.0) < duty


def _checker(rng, y, x):
    cell = rng.uniform(4.0, 14.0)
    theta = rng.uniform(0, np.pi / 2)
    u = (x * np.cos(theta) + y * np.sin(theta)) / cell
    v = (-x * np.sin(theta) + y * np.cos(theta)) / cell
    return (np.floor(u) + np.floor(v)) % 2 == 0


def _blobs(rng, y, x, size):
    mask = np.zeros_like(x, dtype=bool)
    for _ in range(rng.integers(3, 9)):
        cy, cx = rng.uniform(0, size, 2)
        r = rng.uniform(3.0, size / 4)
        if rng.random() < 0.5:
            mask ^= (y - cy) ** 2 + (x - cx) ** 2 < r * r
        else:
            mask ^= (np.abs(y - cy) < r) & (np.abs(x - cx) < r * rng.uniform(0.5, 1.5))
    return mask


def texture(seed: int, size: int = 64) -> np.ndarray:
    """One H x W x 3 texture in [0, 1]: sharp two-colour patterns over a smooth gradient."""
    rng = np.random.default_rng([seed, 0x7E47])
    y, x = _grid(size)
    kind = rng.integers(3)
    if kind == 0:
        mask = _stripes(rng, y, x)
    elif kind == 1:
        mask = _checker(rng, y, x)
    else:
        mask = _blobs(rng, y, x, size)
    c = _colors(rng, 2)
    img = np.where(mask[..., None], c[0], c[1])
    gdir = rng.normal(size=2)
    grad = (y * gdir[0] + x * gdir[1]) / size * rng.uniform(0, 0.15)
    img = img + grad[..., None]
    s = SUPERSAMPLE
    img = img.reshape(size, s, size, s, 3).mean(axis=(1, 3))
    return np.clip(img, 0.0, 1.0)


def texture_set(n: int, size: int = 64, start: int = 0) -> np.ndarray:
    return np.stack([texture(start + i, size) for i in range(n)])
