"""Global semantic embeddings: a deterministic stand-in encoder, prompt guidance, file I/O.

Real CLIP embeddings are computed elsewhere and loaded with
``load_embedding_file``. The toy encoder maps images and whitespace-token
bags through one seeded random projection so both land in the same space.
"""
from __future__ import annotations

import hashlib
import struct
from typing import Protocol

import numpy as np

from .imaging.resample import resize_bicubic

MAGIC = b"SEMB"
POOL = 16
BAG_DIM = POOL * POOL * 3


class EmbeddingFormatError(ValueError):
    pass


class SemanticEncoder(Protocol):
    dim: int

    def encode_image(self, img: np.ndarray) -> np.ndarray: ...

    def encode_text(self, text: str) -> np.ndarray: ...


def normalize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0 or not np.isfinite(n):
        raise ValueError("cannot normalize a zero or non-finite embedding")
    return v / n


def _projection(dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0x5E3B])
    return rng.standard_normal((BAG_DIM, dim)) / np.sqrt(BAG_DIM)


def toy_image_encode(img: np.ndarray, dim: int = 32, seed: int = 0) -> np.ndarray:
    small = resize_bicubic(img, 224, 224)
    pooled = small.reshape(POOL, 224 // POOL, POOL, 224 // POOL, 3).mean(axis=(1, 3))
    v = pooled.reshape(-1) @ _projection(dim, seed)
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def _bucket(token: str) -> int:
    h = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(h, "little") % BAG_DIM


def toy_text_encode(text: str, dim: int = 32, seed: int = 0) -> np.ndarray:
    """Bag of hashed whitespace tokens, projected; the empty string maps to zeros."""
    bag = np.zeros(BAG_DIM)
    for tok in text.split():
        bag[_bucket(tok.lower())] += 1.0
    v = bag @ _projection(dim, seed)
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


class ToyEncoder:
    def __init__(self, dim: int = 32, seed: int = 0):
        self.dim = dim
        self.seed = seed

    def encode_image(self, img):
        return toy_image_encode(img, self.dim, self.seed)

    def encode_text(self, text):
        return toy_text_encode(text, self.dim, self.seed)


def text_guidance(I: np.ndarray, c_pos: str, c_neg: str, alpha: float, enc: SemanticEncoder) -> np.ndarray:
    """Shift an image embedding along TextEnc(c_pos) - TextEnc(c_neg), then renormalize."""
    I = np.asarray(I, dtype=np.float64)
    pos, neg = enc.encode_text(c_pos), enc.encode_text(c_neg)
    if pos.shape != I.shape:
        raise ValueError(f"text embedding dim {pos.shape} != image embedding dim {I.shape}")
    return normalize(I + alpha * (pos - neg))


def save_embedding_file(v: np.ndarray, path) -> None:
    v = np.asarray(v, dtype="<f4").reshape(-1)
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<I", v.size) + v.tobytes())


def load_embedding_file(path, expected_dim: int | None = None) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise EmbeddingFormatError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 8:
        raise EmbeddingFormatError(f"{path}: truncated header")
    (dim,) = struct.unpack("<I", data[4:8])
    if len(data) != 8 + 4 * dim:
        raise EmbeddingFormatError(f"{path}: expected {dim} floats, file holds {(len(data) - 8) // 4}")
    if expected_dim is not None and dim != expected_dim:
        raise EmbeddingFormatError(f"{path}: embedding dim {dim} != model semantic_dim {expected_dim}")
    return np.frombuffer(data, dtype="<f4", offset=8).copy()
