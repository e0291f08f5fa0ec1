"""PNG (8-bit RGB) and binary PPM (P6) codecs.

Images are float arrays of shape (H, W, 3) with values in [0, 1]. Files hold
8-bit samples, so ``load_image(save_image(x))`` equals ``quantize(x)``.
"""
from __future__ import annotations

import os
import struct
import zlib

import numpy as np

from .._kernels import png_unfilter

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class ImageFormatError(ValueError):
    pass


def check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ImageFormatError(f"expected an H x W x 3 image, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ImageFormatError("image must be at least 1x1")
    return img


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def quantize(img: np.ndarray) -> np.ndarray:
    """Round to the nearest 8-bit level, as a round trip through a file would."""
    return to_uint8(img).astype(np.float64) / 255.0


def _chunk(kind: bytes, data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + kind + data + struct.pack(">I", zlib.crc32(data, zlib.crc32(kind)))


def encode_png(img: np.ndarray) -> bytes:
    px = to_uint8(check_image(img))
    h, w, _ = px.shape
    rows = np.zeros((h, 1 + 3 * w), dtype=np.uint8)  # filter byte 0 on every row
    rows[:, 1:] = px.reshape(h, 3 * w)
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    return (
        PNG_SIGNATURE
        + _chunk(b"IHDR", ihdr)
        + _chunk(b"IDAT", zlib.compress(rows.tobytes(), 6))
        + _chunk(b"IEND", b"")
    )


def decode_png(data: bytes) -> np.ndarray:
    if not data.startswith(PNG_SIGNATURE):
        raise ImageFormatError("not a PNG file")
    pos = len(PNG_SIGNATURE)
    header = None
    idat = []
    while True:
        if pos + 8 > len(data):
            raise ImageFormatError("truncated PNG: missing IEND")
        length, kind = struct.unpack(">I4s", data[pos : pos + 8])
        body = data[pos + 8 : pos + 8 + length]
        if len(body) != length or pos + 12 + length > len(data):
            raise ImageFormatError(f"truncated PNG chunk {kind!r}")
        (crc,) = struct.unpack(">I", data[pos + 8 + length : pos + 12 + length])
        if crc != zlib.crc32(body, zlib.crc32(kind)):
            raise ImageFormatError(f"CRC mismatch in chunk {kind!r}")
        pos += 12 + length
        if kind == b"IHDR":
            header = struct.unpack(">IIBBBBB", body)
        elif kind == b"IDAT":
            idat.append(body)
        elif kind == b"IEND":
            break
    if header is None:
        raise ImageFormatError("PNG without IHDR")
    w, h, depth, color, _, _, interlace = header
    if depth != 8:
        raise ImageFormatError(f"unsupported PNG bit depth {depth}")
    if color not in (2, 6):
        raise ImageFormatError(f"unsupported PNG color type {color} (need RGB or RGBA)")
    if interlace:
        raise ImageFormatError("interlaced PNG is not supported")
    channels = 3 if color == 2 else 4
    stride = w * channels
    try:
        raw = np.frombuffer(zlib.decompress(b"".join(idat)), dtype=np.uint8)
    except zlib.error as exc:
        raise ImageFormatError(f"corrupt PNG image data: {exc}") from None
    if raw.size != h * (stride + 1):
        raise ImageFormatError("truncated PNG image data")
    try:
        rows = png_unfilter(raw, h, stride, channels)
    except ValueError as exc:
        raise ImageFormatError(str(exc)) from None
    px = rows.reshape(h, w, channels)[:, :, :3]  # alpha is dropped
    return px.astype(np.float64) / 255.0


def encode_ppm(img: np.ndarray) -> bytes:
    px = to_uint8(check_image(img))
    h, w, _ = px.shape
    return b"P6\n%d %d\n255\n" % (w, h) + px.tobytes()


def decode_ppm(data: bytes) -> np.ndarray:
    if not data.startswith(b"P6"):
        raise ImageFormatError("not a binary PPM (P6) file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageFormatError("malformed PPM header")
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace byte before the raster
    w, h, maxval = fields
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise ImageFormatError(f"bad PPM header {w}x{h} maxval {maxval}")
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    n = w * h * 3
    raster = np.frombuffer(data, dtype=dtype, count=min(n, (len(data) - pos) // np.dtype(dtype).itemsize), offset=pos)
    if raster.size != n:
        raise ImageFormatError("truncated PPM raster")
    return raster.reshape(h, w, 3).astype(np.float64) / maxval


def _format(path) -> str:
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".png":
        return "png"
    if ext in (".ppm", ".pnm"):
        return "ppm"
    raise ImageFormatError(f"unsupported image format {ext!r} (use .png or .ppm)")


def load_image(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if data.startswith(PNG_SIGNATURE):
        return decode_png(data)
    if data.startswith(b"P6"):
        return decode_ppm(data)
    raise ImageFormatError(f"{path}: unrecognised image format")


def save_image(img: np.ndarray, path) -> None:
    fmt = _format(path)
    data = encode_png(img) if fmt == "png" else encode_ppm(img)
    with open(path, "wb") as f:
        f.write(data)
