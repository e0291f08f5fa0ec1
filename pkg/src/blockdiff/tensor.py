"""Dense numeric primitives shared by every other module.

Arrays are plain ``numpy.ndarray``. The working float precision is a
context-local switch (32-bit by default) so that oracle tests can run the
whole stack in 64-bit without threading a dtype argument everywhere.
"""
from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

_PRECISION: contextvars.ContextVar[type] = contextvars.ContextVar("precision", default=np.float32)

GELU_C = math.sqrt(2.0 / math.pi)


class NumericError(ValueError):
    """Raised on shape mismatches or non-finite results."""


def get_dtype() -> np.dtype:
    return np.dtype(_PRECISION.get())


def set_precision(bits: int) -> None:
    _PRECISION.set(_dtype_for(bits))


@contextlib.contextmanager
def precision(bits: int):
    """Temporarily switch the working precision (``with precision(64): ...``)."""
    token = _PRECISION.set(_dtype_for(bits))
    try:
        yield get_dtype()
    finally:
        _PRECISION.reset(token)


def _dtype_for(bits: int) -> type:
    if bits == 32:
        return np.float32
    if bits == 64:
        return np.float64
    raise NumericError(f"unsupported precision: {bits} bits")


def asarray(x, dtype=None) -> np.ndarray:
    return np.asarray(x, dtype=dtype or get_dtype())


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


@dataclass
class LinearParams:
    weight: np.ndarray  # [d_in, d_out]
    bias: np.ndarray  # [d_out]

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise NumericError(
                f"inconsistent linear shapes {self.weight.shape} / {self.bias.shape}"
            )


@dataclass
class LayerNormParams:
    gain: np.ndarray
    shift: np.ndarray
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.epsilon <= 0:
            raise NumericError("layernorm epsilon must be positive")
        if self.gain.shape != self.shift.shape:
            raise NumericError("layernorm gain/shift shape mismatch")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product batched over leading dimensions."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2:
        raise NumericError("matmul needs at least 2-d operands")
    if a.shape[-1] != b.shape[-2]:
        raise NumericError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise NumericError("softmax over an empty last dimension")
    m = np.max(x, axis=-1, keepdims=True)
    # fully masked rows (all -inf) would give nan; callers never build them
    e = x - m
    np.exp(e, out=e)
    e /= np.sum(e, axis=-1, keepdims=True)
    return e


def softmax_backward(dy: np.ndarray, y: np.ndarray) -> np.ndarray:
    out = dy - np.einsum("...i,...i->...", dy, y)[..., None]
    out *= y
    return out


def normalize_last(x: np.ndarray, eps: float = 1e-6):
    """Zero-mean / unit-variance over the last axis. Returns (xhat, rstd)."""
    if x.shape[-1] == 0:
        raise NumericError("layernorm over an empty dimension")
    mu = np.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return xc * rstd, rstd


def normalize_last_backward(dxhat: np.ndarray, xhat: np.ndarray, rstd: np.ndarray) -> np.ndarray:
    n = xhat.shape[-1]
    return rstd * (
        dxhat
        - np.mean(dxhat, axis=-1, keepdims=True)
        - xhat * np.sum(dxhat * xhat, axis=-1, keepdims=True) / n
    )


def layernorm(x: np.ndarray, p: LayerNormParams) -> np.ndarray:
    if x.shape[-1] != p.gain.shape[-1]:
        raise NumericError(f"layernorm dim {x.shape[-1]} != {p.gain.shape[-1]}")
    xhat, _ = normalize_last(x, p.epsilon)
    return xhat * p.gain + p.shift


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + 0.044715 * (x * x * x))))


def gelu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    u = GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(u)
    du = GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def silu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    s = 1.0 / (1.0 + np.exp(-x))
    return dy * (s + x * s * (1.0 - s))


def linear(x: np.ndarray, p: LinearParams) -> np.ndarray:
    if x.shape[-1] != p.weight.shape[0]:
        raise NumericError(f"linear expects last dim {p.weight.shape[0]}, got {x.shape[-1]}")
    return x @ p.weight + p.bias


def linear_backward(dy: np.ndarray, x: np.ndarray, weight: np.ndarray):
    """Returns (dx, dweight, dbias) for ``y = x @ weight + bias``."""
    d_in, d_out = weight.shape
    x2 = x.reshape(-1, d_in)
    dy2 = dy.reshape(-1, d_out)
    return dy @ weight.T, x2.T @ dy2, dy2.sum(axis=0)


def seeded_init(shape, seed: int, scheme: str = "scaled_normal", dtype=None) -> np.ndarray:
    """Deterministic initializer. ``scaled_normal`` uses std 1/sqrt(shape[0])."""
    dtype = dtype or get_dtype()
    shape = tuple(int(s) for s in shape)
    if scheme == "zeros":
        return np.zeros(shape, dtype=dtype)
    if scheme == "ones":
        return np.ones(shape, dtype=dtype)
    rng = np.random.default_rng(seed)
    if scheme == "scaled_normal":
        std = 1.0 / math.sqrt(shape[0]) if shape else 1.0
        return (rng.standard_normal(shape) * std).astype(dtype)
    if scheme == "normal":
        return rng.standard_normal(shape).astype(dtype)
    raise NumericError(f"unknown init scheme {scheme!r}")


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, element by element."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"non-finite function value at element {i}")
        g[i] = (fp - fm) / (2 * h)
    return grad
