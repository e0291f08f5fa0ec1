"""Multi-head attention with LayerNorm on queries and keys."""
from __future__ import annotations

import numpy as np

from ..tensor import normalize_last, normalize_last_backward, softmax_backward, softmax_rows
from .rope import apply_rope


def head_layernorm(x, gain, shift, eps=1e-6):
    xhat, rstd = normalize_last(x, eps)
    return xhat * gain + shift, (xhat, rstd)


def head_layernorm_backward(dy, gain, saved):
    xhat, rstd = saved
    axes = tuple(range(dy.ndim - 1))
    dgain = np.sum(dy * xhat, axis=axes)
    dshift = np.sum(dy, axis=axes)
    return normalize_last_backward(dy * gain, xhat, rstd), dgain, dshift


def attention_core(q, k, v, mask=None):
    """q: (M, T, H, e); k, v: (M, S, H, e); mask: bool (M, S), True = attend.

    Returns (out (M, T, H, e), weights (M, H, T, S)).
    """
    scale = q.dtype.type(1.0 / np.sqrt(q.shape[-1]))
    qh = q.transpose(0, 2, 1, 3)
    kh = k.transpose(0, 2, 3, 1)
    scores = qh @ kh
    scores *= scale
    if mask is not None:
        scores = np.where(mask[:, None, None, :], scores, -np.inf)
    att = softmax_rows(scores)
    out = att @ v.transpose(0, 2, 1, 3)
    return out.transpose(0, 2, 1, 3), att


def attention_core_backward(dout, q, k, v, att):
    scale = q.dtype.type(1.0 / np.sqrt(q.shape[-1]))
    do = dout.transpose(0, 2, 1, 3)  # M H T e
    vh = v.transpose(0, 2, 1, 3)  # M H S e
    dv = (att.transpose(0, 1, 3, 2) @ do).transpose(0, 2, 1, 3)
    datt = do @ vh.transpose(0, 1, 3, 2)
    ds = softmax_backward(datt, att)
    dq = (ds @ k.transpose(0, 2, 1, 3)).transpose(0, 2, 1, 3) * scale
    dk = (ds.transpose(0, 1, 3, 2) @ q.transpose(0, 2, 1, 3)).transpose(0, 2, 1, 3) * scale
    return dq, dk, dv


def qk_norm_attention(Q, K, V, heads, q_norm=None, k_norm=None, q_rope=None, k_rope=None, mask=None, eps=1e-6):
    """softmax(LN(Q) LN(K)^T / sqrt(head_dim)) V, per head.

    Q: (M, T, d); K, V: (M, S, d). ``*_norm`` are (gain, shift) pairs over
    head_dim (unit gain / zero shift when omitted). ``*_rope`` are optional
    (cos, sin) pairs applied after the norm. Returns (M, T, d).
    """
    m, t, d = Q.shape
    s = K.shape[1]
    e = d // heads
    q = Q.reshape(m, t, heads, e)
    k = K.reshape(m, s, heads, e)
    one, zero = np.ones(e, Q.dtype), np.zeros(e, Q.dtype)
    q, _ = head_layernorm(q, *(q_norm or (one, zero)), eps)
    k, _ = head_layernorm(k, *(k_norm or (one, zero)), eps)
    if q_rope is not None:
        q = apply_rope(q, *q_rope)
    if k_rope is not None:
        k = apply_rope(k, *k_rope)
    out, _ = attention_core(q, k, V.reshape(m, s, heads, e), mask)
    return out.reshape(m, t, d)
