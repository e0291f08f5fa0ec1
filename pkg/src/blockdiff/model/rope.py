"""Two-dimensional rotary position embedding.

Each head vector is split in half: the first half is rotated by angles of
the token's x (column) patch coordinate, the second half by its y (row)
coordinate. Within a half, channels (2k, 2k+1) form a rotated pair with
frequency ``base ** (-2k / half)``.
"""
from __future__ import annotations

import numpy as np


class RoPETable:
    def __init__(self, head_dim: int, max_positions: int = 4096, base: float = 10000.0):
        if head_dim % 4:
            raise ValueError("head_dim must be divisible by 4")
        self.head_dim = head_dim
        self.max_positions = max_positions
        self.base = base
        half = head_dim // 2
        k = np.arange(half // 2)
        self.freqs = base ** (-2.0 * k / half)
        ang = np.arange(max_positions)[:, None] * self.freqs[None, :]
        self.cos = np.cos(ang)
        self.sin = np.sin(ang)

    def lookup(self, px: np.ndarray, py: np.ndarray, dtype=np.float64):
        """cos/sin of shape px.shape + (head_dim // 2,) for integer patch coordinates."""
        px = np.asarray(px)
        py = np.asarray(py)
        lo = min(px.min(initial=0), py.min(initial=0))
        hi = max(px.max(initial=0), py.max(initial=0))
        if lo < 0 or hi >= self.max_positions:
            raise ValueError(f"patch position {lo if lo < 0 else hi} outside RoPE table [0, {self.max_positions})")
        cos = np.concatenate([self.cos[px], self.cos[py]], axis=-1).astype(dtype)
        sin = np.concatenate([self.sin[px], self.sin[py]], axis=-1).astype(dtype)
        return cos, sin


def block_positions(rows, cols, g: int, offset=(0, 0)):
    """Patch coordinates (px, py) of every token for blocks at the given rows x cols.

    Returns arrays of shape (len(rows), len(cols), g*g); ``offset`` is the
    (x, y) patch coordinate assigned to the image's top-left patch.
    """
    rows = np.asarray(rows)[:, None, None]
    cols = np.asarray(cols)[None, :, None]
    t = np.arange(g * g)[None, None, :]
    px = offset[0] + cols * g + t % g
    py = offset[1] + rows * g + t // g
    return px + 0 * rows, py + 0 * cols


def apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate channel pairs of x (..., head_dim); cos/sin broadcast to (..., head_dim//2)."""
    xe = x[..., 0::2]
    xo = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos
    return out


def rope_backward(dy: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    return apply_rope(dy, cos, -sin)
