"""Hot loops for image filtering, with a numba path and a pure-numpy path.

Every separable filter in the package (resampling, Gaussian blur, the SSIM
window) reduces to one primitive: each output row is a weighted sum of a few
input rows, ``out[o] = sum_t w[o, t] * src[idx[o, t]]``.

Set ``BLOCKDIFF_NUMBA=0`` to force the numpy path. The flag is read at import.
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

USE_NUMBA = numba is not None and os.environ.get("BLOCKDIFF_NUMBA", "1") not in ("0", "false", "no")


def gather_weighted_numpy(src: np.ndarray, idx: np.ndarray, wts: np.ndarray) -> np.ndarray:
    out = np.zeros((idx.shape[0], src.shape[1]), dtype=src.dtype)
    for t in range(idx.shape[1]):
        out += wts[:, t, None].astype(src.dtype) * src[idx[:, t]]
    return out


if numba is not None:

    @numba.njit(cache=True, nogil=True)
    def gather_weighted_numba(src, idx, wts):
        n_out, taps = idx.shape
        m = src.shape[1]
        out = np.zeros((n_out, m), dtype=src.dtype)
        for o in range(n_out):
            for t in range(taps):
                w = wts[o, t]
                if w == 0.0:
                    continue
                row = idx[o, t]
                for c in range(m):
                    out[o, c] += w * src[row, c]
        return out

else:  # pragma: no cover
    gather_weighted_numba = None


def gather_weighted(src: np.ndarray, idx: np.ndarray, wts: np.ndarray) -> np.ndarray:
    """Apply a row-gather filter to a 2-d array (rows are filtered, columns carried)."""
    src = np.ascontiguousarray(src)
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    wts = np.ascontiguousarray(wts, dtype=src.dtype)
    if USE_NUMBA:
        return gather_weighted_numba(src, idx, wts)
    return gather_weighted_numpy(src, idx, wts)


def filter_axis(x: np.ndarray, axis: int, idx: np.ndarray, wts: np.ndarray) -> np.ndarray:
    """Apply a gather filter along ``axis`` of an n-d array."""
    moved = np.moveaxis(x, axis, 0)
    shape = moved.shape
    out = gather_weighted(moved.reshape(shape[0], -1), idx, wts)
    return np.moveaxis(out.reshape((idx.shape[0],) + shape[1:]), 0, axis)


def _paeth(a: int, b: int, c: int) -> int:
    p = a + b - c
    pa = abs(p - a)
    pb = abs(p - b)
    pc = abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    if pb <= pc:
        return b
    return c


def png_unfilter_python(raw: np.ndarray, height: int, stride: int, bpp: int) -> np.ndarray:
    """Undo PNG scanline filters. ``raw`` holds height * (1 + stride) bytes."""
    out = np.zeros((height, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.int64)
    for y in range(height):
        base = y * (stride + 1)
        ftype = int(raw[base])
        line = raw[base + 1 : base + 1 + stride].astype(np.int64)
        if ftype == 0:
            cur = line
        elif ftype == 1:
            cur = line.copy()
            for x in range(bpp, stride):
                cur[x] = (cur[x] + cur[x - bpp]) & 0xFF
        elif ftype == 2:
            cur = (line + prev) & 0xFF
        elif ftype == 3:
            cur = line.copy()
            for x in range(stride):
                left = cur[x - bpp] if x >= bpp else 0
                cur[x] = (cur[x] + ((left + prev[x]) >> 1)) & 0xFF
        elif ftype == 4:
            cur = line.copy()
            for x in range(stride):
                a = cur[x - bpp] if x >= bpp else 0
                c = prev[x - bpp] if x >= bpp else 0
                cur[x] = (cur[x] + _paeth(int(a), int(prev[x]), int(c))) & 0xFF
        else:
            raise ValueError(f"bad PNG filter type {ftype} on row {y}")
        out[y] = cur
        prev = cur
    return out


if numba is not None:

    @numba.njit(cache=True, nogil=True)
    def png_unfilter_numba(raw, height, stride, bpp):
        out = np.zeros((height, stride), dtype=np.uint8)
        prev = np.zeros(stride, dtype=np.int64)
        cur = np.zeros(stride, dtype=np.int64)
        for y in range(height):
            base = y * (stride + 1)
            ftype = raw[base]
            if ftype > 4:
                return out, y
            for x in range(stride):
                v = np.int64(raw[base + 1 + x])
                a = cur[x - bpp] if x >= bpp else 0
                b = prev[x]
                c = prev[x - bpp] if x >= bpp else 0
                if ftype == 1:
                    v += a
                elif ftype == 2:
                    v += b
                elif ftype == 3:
                    v += (a + b) >> 1
                elif ftype == 4:
                    p = a + b - c
                    pa = abs(p - a)
                    pb = abs(p - b)
                    pc = abs(p - c)
                    if pa <= pb and pa <= pc:
                        v += a
                    elif pb <= pc:
                        v += b
                    else:
                        v += c
                cur[x] = v & 0xFF
            for x in range(stride):
                out[y, x] = cur[x]
                prev[x] = cur[x]
        return out, -1

else:  # pragma: no cover
    png_unfilter_numba = None


def png_unfilter(raw: np.ndarray, height: int, stride: int, bpp: int) -> np.ndarray:
    if USE_NUMBA:
        out, bad_row = png_unfilter_numba(raw, height, stride, bpp)
        if bad_row >= 0:
            raise ValueError(f"bad PNG filter type {raw[bad_row * (stride + 1)]} on row {bad_row}")
        return out
    return png_unfilter_python(raw, height, stride, bpp)
