"""Parameter naming, shapes and initialization."""
from __future__ import annotations

import numpy as np

from ..tensor import get_dtype
from .config import ModelConfig

PARAM_CLASSES = ("attention", "ffn", "rel_pos", "patch_embed", "adaln", "lr_cross", "conditioning", "final")


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f, hd = cfg.hidden, cfg.ffn_dim, cfg.head_dim
    s: dict[str, tuple[int, ...]] = {
        "patch_embed.w": (cfg.in_channels * cfg.patch_size**2, d),
        "patch_embed.b": (d,),
        "lr_embed.w": (cfg.patch_dim, d),
        "lr_embed.b": (d,),
        "time.w1": (cfg.time_freq_dim, d),
        "time.b1": (d,),
        "time.w2": (d, d),
        "time.b2": (d,),
        "sem.w": (cfg.semantic_dim, d),
        "sem.b": (d,),
        "rel_pos": (4, d),
    }
    for l in range(cfg.layers):
        p = f"layers.{l}."
        s[p + "ada.w"] = (d, 6 * d)
        s[p + "ada.b"] = (6 * d,)
        for name in ("wq", "wk", "wv", "wo"):
            s[p + "attn." + name] = (d, d)
            s[p + "attn.b" + name[1]] = (d,)
        for name in ("q_norm", "k_norm"):
            s[p + f"attn.{name}.g"] = (hd,)
            s[p + f"attn.{name}.b"] = (hd,)
        s[p + "ffn.w1"] = (d, f)
        s[p + "ffn.b1"] = (f,)
        s[p + "ffn.w2"] = (f, d)
        s[p + "ffn.b2"] = (d,)
        if l == 0:
            for name in ("wq", "wk", "wv", "wo"):
                s[p + "cross." + name] = (d, d)
                s[p + "cross.b" + name[1]] = (d,)
            for name in ("q_norm", "k_norm"):
                s[p + f"cross.{name}.g"] = (hd,)
                s[p + f"cross.{name}.b"] = (hd,)
    s["final.ada.w"] = (d, 2 * d)
    s["final.ada.b"] = (2 * d,)
    s["final.w"] = (d, cfg.patch_dim)
    s["final.b"] = (cfg.patch_dim,)
    return s


def param_class(name: str) -> str:
    if name == "rel_pos":
        return "rel_pos"
    if name.startswith(("patch_embed", "lr_embed")):
        return "patch_embed" if name.startswith("patch") else "lr_cross"
    if name.startswith(("time.", "sem.")):
        return "conditioning"
    if ".ada." in name or name.startswith("final.ada"):
        return "adaln"
    if ".cross." in name:
        return "lr_cross"
    if ".attn." in name:
        return "attention"
    if ".ffn." in name:
        return "ffn"
    return "final"


def init_params(cfg: ModelConfig, seed: int = 0, scheme: str = "default", dtype=None) -> dict[str, np.ndarray]:
    """``default``: scaled-normal projections, zero biases and zero adaLN outputs.

    ``random``: every tensor random (biases, modulation, norm gains included),
    so that tests exercise every path with non-degenerate values.
    """
    dtype = dtype or get_dtype()
    out = {}
    for k, (name, shape) in enumerate(param_shapes(cfg).items()):
        rng = np.random.default_rng([seed, k])
        is_norm = name.endswith(("_norm.g", "_norm.b"))
        if scheme == "random":
            if name.endswith("_norm.g"):
                arr = 1.0 + 0.1 * rng.standard_normal(shape)
            elif len(shape) == 1 or is_norm:
                arr = 0.1 * rng.standard_normal(shape)
            elif ".ada." in name or name.startswith("final.ada"):
                arr = 0.3 * rng.standard_normal(shape) / np.sqrt(shape[0])
            else:
                arr = rng.standard_normal(shape) / np.sqrt(shape[0])
        elif scheme == "default":
            if name.endswith("_norm.g"):
                arr = np.ones(shape)
            elif len(shape) == 1 or ".ada." in name or name.startswith("final.ada"):
                arr = np.zeros(shape)
            else:
                arr = rng.standard_normal(shape) / np.sqrt(shape[0])
        else:
            raise ValueError(f"unknown init scheme {scheme!r}")
        out[name] = np.asarray(arr, dtype=dtype)
    return out


def cast_params(params: dict[str, np.ndarray], dtype) -> dict[str, np.ndarray]:
    return {k: v.astype(dtype) for k, v in params.items()}


def count_params(params: dict[str, np.ndarray]) -> int:
    return int(sum(v.size for v in params.values()))
