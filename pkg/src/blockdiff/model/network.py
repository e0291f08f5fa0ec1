"""Diffusion transformer backbone with unidirectional block attention.

Hidden states live on a block lattice: arrays of shape (N, h, w, T, d) with
T patch tokens per block. In every layer a block's queries attend to the keys
and values of four blocks: itself, its upper-left, left and top neighbours.
A learnable vector per neighbour slot is added to the key-path input.

Two execution modes share one layer implementation:

* ``forward``: the whole grid at once (training path; has a backward pass).
* ``forward_streamed``: tiles in plan order, with neighbour key/value state
  read from a ``KVCacheStore``. Outputs match ``forward``.

Missing neighbours on the first row/column are replaced by the clamped block
(the block itself, or its left/top neighbour) while keeping the slot's own
position vector. Both modes build an "extended" grid with one extra leading
row and column whose entries come from clamped global coordinates.
"""
from __future__ import annotations

import math

import numpy as np

from ..geometry import KVCacheStore, blocks_to_image, image_to_blocks, patchify, unpatchify
from ..tensor import (
    gelu,
    gelu_backward,
    linear_backward,
    normalize_last,
    normalize_last_backward,
    silu,
    silu_backward,
)
from .attention import attention_core, attention_core_backward, head_layernorm, head_layernorm_backward
from .config import ModelConfig
from .rope import RoPETable, apply_rope, block_positions, rope_backward

# (row, col) offsets of the four key/value slots: self, upper-left, left, top
SLOTS = ((0, 0), (-1, -1), (0, -1), (-1, 0))
TIME_SCALE = 1000.0


def timestep_features(c_noise: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    a = TIME_SCALE * np.asarray(c_noise, dtype=np.float64).reshape(-1, 1) * freqs[None, :]
    return np.concatenate([np.cos(a), np.sin(a)], axis=-1)


def _bcast(v: np.ndarray) -> np.ndarray:
    """(N, d) per-sample vector -> broadcastable against (N, h, w, T, d)."""
    return v[:, None, None, None, :]


def _sum_to_sample(x: np.ndarray) -> np.ndarray:
    return x.sum(axis=(1, 2, 3))


def _slot(ext: np.ndarray, s: int, rh: int, rw: int, axis: int = 1) -> np.ndarray:
    dr, dc = SLOTS[s]
    idx = [slice(None)] * ext.ndim
    idx[axis] = slice(1 + dr, 1 + dr + rh)
    idx[axis + 1] = slice(1 + dc, 1 + dc + rw)
    return ext[tuple(idx)]


def _ext_coords(lo: int, hi: int) -> np.ndarray:
    return np.maximum(np.arange(lo - 1, hi), 0)


class DiT:
    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray]):
        self.cfg = cfg
        self.params = params
        self.rope = RoPETable(cfg.head_dim, cfg.max_positions, cfg.rope_base)
        self.last_store: KVCacheStore | None = None

    @property
    def dtype(self):
        return self.params["rel_pos"].dtype

    # ------------------------------------------------------------------
    # conditioning
    def conditioning(self, c_noise, sem, keep=False):
        """Time embedding of c_noise plus projected semantic embedding; (N, d)."""
        P = self.params
        feats = timestep_features(c_noise, self.cfg.time_freq_dim).astype(self.dtype)
        h1 = feats @ P["time.w1"] + P["time.b1"]
        a1 = silu(h1)
        temb = a1 @ P["time.w2"] + P["time.b2"]
        sem = np.asarray(sem, dtype=self.dtype).reshape(len(feats), -1)
        if sem.shape[1] != self.cfg.semantic_dim:
            raise ValueError(f"semantic embedding dim {sem.shape[1]} != {self.cfg.semantic_dim}")
        cond = temb + sem @ P["sem.w"] + P["sem.b"]
        ctx = (feats, h1, a1, sem) if keep else None
        return cond, ctx

    def modulations(self, cond):
        sc = silu(cond)
        P = self.params
        layer_mods = [np.split(sc @ P[f"layers.{l}.ada.w"] + P[f"layers.{l}.ada.b"], 6, axis=-1) for l in range(self.cfg.layers)]
        final_mod = np.split(sc @ P["final.ada.w"] + P["final.ada.b"], 2, axis=-1)
        return sc, layer_mods, final_mod

    # ------------------------------------------------------------------
    # embeddings
    def _patches(self, img: np.ndarray) -> np.ndarray:
        return patchify(image_to_blocks(img, self.cfg.block_size), self.cfg.patch_size)

    def embed(self, x_in: np.ndarray, lr_up: np.ndarray):
        if x_in.shape != lr_up.shape:
            raise ValueError(f"noisy input {x_in.shape} and LR condition {lr_up.shape} differ")
        pix = self._patches(np.concatenate([x_in, lr_up], axis=-1).astype(self.dtype))
        return pix @ self.params["patch_embed.w"] + self.params["patch_embed.b"], pix

    def _region_rope(self, rows, cols, offset):
        px, py = block_positions(rows, cols, self.cfg.patches_per_side, offset)
        cos, sin = self.rope.lookup(px, py, self.dtype)
        return cos, sin  # (len(rows), len(cols), T, e/2)

    # ------------------------------------------------------------------
    # unidirectional block attention
    def _extend(self, arr, ext_rows, ext_cols, r0, c0, halo, l, which):
        li = ext_rows - r0
        lj = ext_cols - c0
        if li.min() >= 0 and lj.min() >= 0:
            return arr[:, li][:, :, lj]
        n, rh, rw = arr.shape[:3]
        out = np.empty((n, len(li), len(lj)) + arr.shape[3:], dtype=arr.dtype)
        for a, gi in enumerate(ext_rows):
            for b, gj in enumerate(ext_cols):
                if li[a] >= 0 and lj[b] >= 0:
                    out[:, a, b] = arr[:, li[a], lj[b]]
                else:
                    out[:, a, b] = halo(l, int(gi), int(gj))[which]
        return out

    @staticmethod
    def _unextend(d_ext, li, lj, shape):
        tmp = np.zeros((shape[0], shape[1], d_ext.shape[2]) + shape[3:], dtype=d_ext.dtype)
        for a, i in enumerate(li):
            tmp[:, i] += d_ext[:, a]
        out = np.zeros(shape, dtype=d_ext.dtype)
        for b, j in enumerate(lj):
            out[:, :, j] += tmp[:, :, b]
        return out

    def _self_attention(self, l, x, region, offset, halo, keep):
        cfg, P = self.cfg, self.params
        pre = f"layers.{l}.attn."
        n, rh, rw, t, d = x.shape
        H, e = cfg.heads, cfg.head_dim
        r0, r1, c0, c1 = region
        eps = cfg.norm_eps

        q = x @ P[pre + "wq"] + P[pre + "bq"]
        kb = x @ P[pre + "wk"] + P[pre + "bk"]
        v = x @ P[pre + "wv"] + P[pre + "bv"]

        qn, q_saved = head_layernorm(q.reshape(n, rh, rw, t, H, e), P[pre + "q_norm.g"], P[pre + "q_norm.b"], eps)
        cos, sin = self._region_rope(np.arange(r0, r1), np.arange(c0, c1), offset)
        q_rope = (cos[None, :, :, :, None, :], sin[None, :, :, :, None, :])
        qr = apply_rope(qn, *q_rope)

        ext_rows, ext_cols = _ext_coords(r0, r1), _ext_coords(c0, c1)
        kb_ext = self._extend(kb, ext_rows, ext_cols, r0, c0, halo, l, 0)
        v_ext = self._extend(v, ext_rows, ext_cols, r0, c0, halo, l, 1)
        cos_e, sin_e = self._region_rope(ext_rows, ext_cols, offset)

        pw = P["rel_pos"] @ P[pre + "wk"]
        ks = np.stack([_slot(kb_ext, s, rh, rw) + pw[s] for s in range(4)], axis=3)
        vs = np.stack([_slot(v_ext, s, rh, rw) for s in range(4)], axis=3)
        k_cos = np.stack([_slot(cos_e, s, rh, rw, axis=0) for s in range(4)], axis=2)
        k_sin = np.stack([_slot(sin_e, s, rh, rw, axis=0) for s in range(4)], axis=2)
        k_rope = (k_cos[None, :, :, :, :, None, :], k_sin[None, :, :, :, :, None, :])

        kn, k_saved = head_layernorm(ks.reshape(n, rh, rw, 4, t, H, e), P[pre + "k_norm.g"], P[pre + "k_norm.b"], eps)
        kr = apply_rope(kn, *k_rope)

        m = n * rh * rw
        qf = qr.reshape(m, t, H, e)
        kf = kr.reshape(m, 4 * t, H, e)
        vf = vs.reshape(m, 4 * t, H, e)
        o, att = attention_core(qf, kf, vf)
        o = o.reshape(n, rh, rw, t, d)
        out = o @ P[pre + "wo"] + P[pre + "bo"]
        ctx = None
        if keep:
            ctx = dict(x=x, q_saved=q_saved, q_rope=q_rope, k_saved=k_saved, k_rope=k_rope,
                       qf=qf, kf=kf, vf=vf, att=att, o=o, ext=(ext_rows - r0, ext_cols - c0))
        return out, ctx, (kb, v)

    def _self_attention_backward(self, l, dout, ctx, grads):
        cfg, P = self.cfg, self.params
        pre = f"layers.{l}.attn."
        x = ctx["x"]
        n, rh, rw, t, d = x.shape
        H, e = cfg.heads, cfg.head_dim

        do, grads[pre + "wo"], grads[pre + "bo"] = linear_backward(dout, ctx["o"], P[pre + "wo"])
        m = n * rh * rw
        dqf, dkf, dvf = attention_core_backward(do.reshape(m, t, H, e), ctx["qf"], ctx["kf"], ctx["vf"], ctx["att"])

        dqn = rope_backward(dqf.reshape(n, rh, rw, t, H, e), *ctx["q_rope"])
        dq, grads[pre + "q_norm.g"], grads[pre + "q_norm.b"] = head_layernorm_backward(dqn, P[pre + "q_norm.g"], ctx["q_saved"])
        dq = dq.reshape(n, rh, rw, t, d)

        dkn = rope_backward(dkf.reshape(n, rh, rw, 4, t, H, e), *ctx["k_rope"])
        dks, grads[pre + "k_norm.g"], grads[pre + "k_norm.b"] = head_layernorm_backward(dkn, P[pre + "k_norm.g"], ctx["k_saved"])
        dks = dks.reshape(n, rh, rw, 4, t, d)
        dvs = dvf.reshape(n, rh, rw, 4, t, d)

        li, lj = ctx["ext"]
        ext_shape = (n, len(li), len(lj), t, d)
        dkb_ext = np.zeros(ext_shape, dtype=dks.dtype)
        dv_ext = np.zeros(ext_shape, dtype=dks.dtype)
        for s in range(4):
            _slot(dkb_ext, s, rh, rw)[...] += dks[:, :, :, s]
            _slot(dv_ext, s, rh, rw)[...] += dvs[:, :, :, s]
        dpw = dks.sum(axis=(0, 1, 2, 4))  # (4, d)
        dkb = self._unextend(dkb_ext, li, lj, x.shape)
        dv = self._unextend(dv_ext, li, lj, x.shape)

        dx, grads[pre + "wq"], grads[pre + "bq"] = linear_backward(dq, x, P[pre + "wq"])
        dxk, dwk, grads[pre + "bk"] = linear_backward(dkb, x, P[pre + "wk"])
        dxv, grads[pre + "wv"], grads[pre + "bv"] = linear_backward(dv, x, P[pre + "wv"])
        grads[pre + "wk"] = dwk + P["rel_pos"].T @ dpw
        grads["rel_pos"] = grads.get("rel_pos", 0) + dpw @ P[pre + "wk"].T
        return dx + dxk + dxv

    # ------------------------------------------------------------------
    # nearby LR cross attention (first layer only)
    def _lr_neighbourhood(self, lr_up, region):
        """LR tokens for the blocks around a region, zero-padded to (rh+2, rw+2)."""
        B = self.cfg.block_size
        r0, r1, c0, c1 = region
        hh, ww = lr_up.shape[1] // B, lr_up.shape[2] // B
        lo_r, hi_r = max(r0 - 1, 0), min(r1 + 1, hh)
        lo_c, hi_c = max(c0 - 1, 0), min(c1 + 1, ww)
        pix = self._patches(lr_up[:, lo_r * B : hi_r * B, lo_c * B : hi_c * B].astype(self.dtype))
        tok = pix @ self.params["lr_embed.w"] + self.params["lr_embed.b"]
        rh, rw = r1 - r0, c1 - c0
        ext = np.zeros((tok.shape[0], rh + 2, rw + 2) + tok.shape[3:], dtype=tok.dtype)
        valid = np.zeros((rh + 2, rw + 2), dtype=bool)
        a, b = lo_r - (r0 - 1), lo_c - (c0 - 1)
        ext[:, a : a + hi_r - lo_r, b : b + hi_c - lo_c] = tok
        valid[a : a + hi_r - lo_r, b : b + hi_c - lo_c] = True
        rows = np.clip(np.arange(r0 - 1, r1 + 1), 0, hh - 1)
        cols = np.clip(np.arange(c0 - 1, c1 + 1), 0, ww - 1)
        return ext, valid, pix, (a, b, hi_r - lo_r, hi_c - lo_c), rows, cols

    def _cross_attention(self, z, lr_up, region, offset, keep, lr_tokens=None):
        cfg, P = self.cfg, self.params
        pre = "layers.0.cross."
        n, rh, rw, t, d = z.shape
        H, e = cfg.heads, cfg.head_dim
        eps = cfg.norm_eps
        r0, r1, c0, c1 = region

        xc, c_rstd = normalize_last(z, eps)
        q = xc @ P[pre + "wq"] + P[pre + "bq"]
        qn, q_saved = head_layernorm(q.reshape(n, rh, rw, t, H, e), P[pre + "q_norm.g"], P[pre + "q_norm.b"], eps)
        cos, sin = self._region_rope(np.arange(r0, r1), np.arange(c0, c1), offset)
        q_rope = (cos[None, :, :, :, None, :], sin[None, :, :, :, None, :])
        qr = apply_rope(qn, *q_rope)

        if lr_tokens is None:
            lr_ext, valid, lr_pix, placed, rows, cols = self._lr_neighbourhood(lr_up, region)
        else:  # caller-supplied neighbourhood tokens (n, rh+2, rw+2, t, d) with validity
            lr_ext, valid = lr_tokens
            lr_pix = placed = None
            rows = np.clip(np.arange(r0 - 1, r1 + 1), 0, None)
            cols = np.clip(np.arange(c0 - 1, c1 + 1), 0, None)
        kb = lr_ext @ P[pre + "wk"] + P[pre + "bk"]
        vb = lr_ext @ P[pre + "wv"] + P[pre + "bv"]
        kn, k_saved = head_layernorm(kb.reshape(lr_ext.shape[:4] + (H, e)), P[pre + "k_norm.g"], P[pre + "k_norm.b"], eps)
        kcos, ksin = self._region_rope(rows, cols, offset)
        k_rope = (kcos[None, :, :, :, None, :], ksin[None, :, :, :, None, :])
        kr = apply_rope(kn, *k_rope)

        win = [(a, b) for a in range(3) for b in range(3)]
        ks = np.stack([kr[:, a : a + rh, b : b + rw] for a, b in win], axis=3)
        vs = np.stack([vb[:, a : a + rh, b : b + rw] for a, b in win], axis=3)
        mask = np.stack([valid[a : a + rh, b : b + rw] for a, b in win], axis=2)  # rh rw 9
        m = n * rh * rw
        mask = np.broadcast_to(np.repeat(mask, t, axis=2)[None], (n, rh, rw, 9 * t)).reshape(m, 9 * t)

        qf = qr.reshape(m, t, H, e)
        kf = ks.reshape(m, 9 * t, H, e)
        vf = vs.reshape(m, 9 * t, H, e)
        o, att = attention_core(qf, kf, vf, mask)
        o = o.reshape(n, rh, rw, t, d)
        out = o @ P[pre + "wo"] + P[pre + "bo"]
        ctx = None
        if keep:
            ctx = dict(xc=xc, c_rstd=c_rstd, q_saved=q_saved, q_rope=q_rope, k_saved=k_saved, k_rope=k_rope,
                       lr_ext=lr_ext, lr_pix=lr_pix, placed=placed, qf=qf, kf=kf, vf=vf, att=att, o=o)
        return out, ctx

    def _cross_attention_backward(self, dout, ctx, grads):
        cfg, P = self.cfg, self.params
        pre = "layers.0.cross."
        xc = ctx["xc"]
        n, rh, rw, t, d = xc.shape
        H, e = cfg.heads, cfg.head_dim
        lr_ext = ctx["lr_ext"]

        do, grads[pre + "wo"], grads[pre + "bo"] = linear_backward(dout, ctx["o"], P[pre + "wo"])
        m = n * rh * rw
        dqf, dkf, dvf = attention_core_backward(do.reshape(m, t, H, e), ctx["qf"], ctx["kf"], ctx["vf"], ctx["att"])
        dqn = rope_backward(dqf.reshape(n, rh, rw, t, H, e), *ctx["q_rope"])
        dq, grads[pre + "q_norm.g"], grads[pre + "q_norm.b"] = head_layernorm_backward(dqn, P[pre + "q_norm.g"], ctx["q_saved"])
        dxc, grads[pre + "wq"], grads[pre + "bq"] = linear_backward(dq.reshape(n, rh, rw, t, d), xc, P[pre + "wq"])

        dks = dkf.reshape(n, rh, rw, 9, t, H, e)
        dvs = dvf.reshape(n, rh, rw, 9, t, d)
        dkr = np.zeros(lr_ext.shape[:4] + (H, e), dtype=dks.dtype)
        dvb = np.zeros(lr_ext.shape, dtype=dks.dtype)
        for s, (a, b) in enumerate((a, b) for a in range(3) for b in range(3)):
            dkr[:, a : a + rh, b : b + rw] += dks[:, :, :, s]
            dvb[:, a : a + rh, b : b + rw] += dvs[:, :, :, s]
        dkn = rope_backward(dkr, *ctx["k_rope"])
        dkb, grads[pre + "k_norm.g"], grads[pre + "k_norm.b"] = head_layernorm_backward(dkn, P[pre + "k_norm.g"], ctx["k_saved"])
        dkb = dkb.reshape(lr_ext.shape)
        dlr1, grads[pre + "wk"], grads[pre + "bk"] = linear_backward(dkb, lr_ext, P[pre + "wk"])
        dlr2, grads[pre + "wv"], grads[pre + "bv"] = linear_backward(dvb, lr_ext, P[pre + "wv"])
        dlr = dlr1 + dlr2
        if ctx["lr_pix"] is not None:
            a, b, nr, nc = ctx["placed"]
            _, grads["lr_embed.w"], grads["lr_embed.b"] = linear_backward(
                dlr[:, a : a + nr, b : b + nc], ctx["lr_pix"], P["lr_embed.w"]
            )
        return normalize_last_backward(dxc, xc, ctx["c_rstd"])

    # ------------------------------------------------------------------
    def _layer(self, l, z, mods, region, offset, halo, lr_up, keep):
        cfg, P = self.cfg, self.params
        pre = f"layers.{l}."
        sh1, sc1, g1, sh2, sc2, g2 = mods
        eps = cfg.norm_eps
        ctx = {} if keep else None

        xn1, r1 = normalize_last(z, eps)
        x1 = xn1 * (1 + _bcast(sc1)) + _bcast(sh1)
        a_out, a_ctx, kv = self._self_attention(l, x1, region, offset, halo, keep)
        z = z + _bcast(g1) * a_out

        if l == 0:
            c_out, c_ctx = self._cross_attention(z, lr_up, region, offset, keep)
            z = z + c_out

        xn2, r2 = normalize_last(z, eps)
        x2 = xn2 * (1 + _bcast(sc2)) + _bcast(sh2)
        hpre = x2 @ P[pre + "ffn.w1"] + P[pre + "ffn.b1"]
        act = gelu(hpre)
        f = act @ P[pre + "ffn.w2"] + P[pre + "ffn.b2"]
        z = z + _bcast(g2) * f
        if keep:
            ctx.update(xn1=xn1, r1=r1, a_out=a_out, a_ctx=a_ctx, xn2=xn2, r2=r2, x2=x2, hpre=hpre, act=act, f=f)
            if l == 0:
                ctx["c_ctx"] = c_ctx
        return z, ctx, kv

    def _layer_backward(self, l, dz, mods, ctx, grads):
        P = self.params
        pre = f"layers.{l}."
        sh1, sc1, g1, sh2, sc2, g2 = mods
        dmods = [None] * 6

        # ffn
        dmods[5] = _sum_to_sample(dz * ctx["f"])
        df = dz * _bcast(g2)
        dact, grads[pre + "ffn.w2"], grads[pre + "ffn.b2"] = linear_backward(df, ctx["act"], P[pre + "ffn.w2"])
        dh = gelu_backward(dact, ctx["hpre"])
        dx2, grads[pre + "ffn.w1"], grads[pre + "ffn.b1"] = linear_backward(dh, ctx["x2"], P[pre + "ffn.w1"])
        dmods[3] = _sum_to_sample(dx2)
        dmods[4] = _sum_to_sample(dx2 * ctx["xn2"])
        dz = dz + normalize_last_backward(dx2 * (1 + _bcast(sc2)), ctx["xn2"], ctx["r2"])

        if l == 0:
            dz = dz + self._cross_attention_backward(dz, ctx["c_ctx"], grads)

        dmods[2] = _sum_to_sample(dz * ctx["a_out"])
        da = dz * _bcast(g1)
        dx1 = self._self_attention_backward(l, da, ctx["a_ctx"], grads)
        dmods[0] = _sum_to_sample(dx1)
        dmods[1] = _sum_to_sample(dx1 * ctx["xn1"])
        dz = dz + normalize_last_backward(dx1 * (1 + _bcast(sc1)), ctx["xn1"], ctx["r1"])
        return dz, np.concatenate(dmods, axis=-1)

    # ------------------------------------------------------------------
    def _final(self, z, final_mod, keep):
        sh, sc = final_mod
        xn, r = normalize_last(z, self.cfg.norm_eps)
        xf = xn * (1 + _bcast(sc)) + _bcast(sh)
        out = xf @ self.params["final.w"] + self.params["final.b"]
        blocks = unpatchify(out, self.cfg.patch_size)
        return blocks_to_image(blocks), ((xn, r, xf) if keep else None)

    def forward(self, x_in, lr_up, c_noise, sem, offset=(0, 0), keep=False):
        """Whole-grid forward. x_in, lr_up: (N, H, W, 3) model-range arrays.

        Returns the raw network output (N, H, W, 3) and, with keep=True, the
        activations needed by ``backward``.
        """
        x_in = np.asarray(x_in, dtype=self.dtype)
        lr_up = np.asarray(lr_up, dtype=self.dtype)
        n, H, W, _ = x_in.shape
        B = self.cfg.block_size
        if H % B or W % B:
            raise ValueError(f"input {H}x{W} not divisible by block size {B}")
        region = (0, H // B, 0, W // B)
        cond, c_ctx = self.conditioning(c_noise, sem, keep)
        sc, layer_mods, final_mod = self.modulations(cond)
        z, pix = self.embed(x_in, lr_up)
        ctxs = []
        for l in range(self.cfg.layers):
            z, ctx, _ = self._layer(l, z, layer_mods[l], region, offset, None, lr_up, keep)
            ctxs.append(ctx)
        out, f_ctx = self._final(z, final_mod, keep)
        if not keep:
            return out
        return out, dict(cond=cond, c_ctx=c_ctx, sc=sc, layer_mods=layer_mods, final_mod=final_mod,
                         pix=pix, z=z, layers=ctxs, final=f_ctx)

    def backward(self, dout, fctx) -> dict[str, np.ndarray]:
        """Gradients of sum(dout * forward(...)) w.r.t. every parameter."""
        cfg, P = self.cfg, self.params
        grads: dict[str, np.ndarray] = {}
        dout = np.asarray(dout, dtype=self.dtype)
        B, p = cfg.block_size, cfg.patch_size
        dtok = patchify(image_to_blocks(dout, B), p)

        xn, r, xf = fctx["final"]
        sh, sc_f = fctx["final_mod"]
        dxf, grads["final.w"], grads["final.b"] = linear_backward(dtok, xf, P["final.w"])
        dfinal_mod = np.concatenate([_sum_to_sample(dxf), _sum_to_sample(dxf * xn)], axis=-1)
        dz = normalize_last_backward(dxf * (1 + _bcast(sc_f)), xn, r)

        sc = fctx["sc"]
        dsc = np.zeros_like(sc)
        grads["final.ada.w"] = sc.T @ dfinal_mod
        grads["final.ada.b"] = dfinal_mod.sum(axis=0)
        dsc += dfinal_mod @ P["final.ada.w"].T
        for l in reversed(range(cfg.layers)):
            dz, dmod = self._layer_backward(l, dz, fctx["layer_mods"][l], fctx["layers"][l], grads)
            grads[f"layers.{l}.ada.w"] = sc.T @ dmod
            grads[f"layers.{l}.ada.b"] = dmod.sum(axis=0)
            dsc += dmod @ P[f"layers.{l}.ada.w"].T

        _, grads["patch_embed.w"], grads["patch_embed.b"] = linear_backward(dz, fctx["pix"], P["patch_embed.w"])

        dcond = silu_backward(dsc, fctx["cond"])
        feats, h1, a1, sem = fctx["c_ctx"]
        grads["sem.w"] = sem.T @ dcond
        grads["sem.b"] = dcond.sum(axis=0)
        da1, grads["time.w2"], grads["time.b2"] = linear_backward(dcond, a1, P["time.w2"])
        dh1 = silu_backward(da1, h1)
        _, grads["time.w1"], grads["time.b1"] = linear_backward(dh1, feats, P["time.w1"])
        for k, v in P.items():
            if k not in grads:
                grads[k] = np.zeros_like(v)
        return grads

    # ------------------------------------------------------------------
    def forward_streamed(self, x_in, lr_up, c_noise, sem, plan, offset=(0, 0), store: KVCacheStore | None = None):
        """Tile-by-tile forward following ``plan``; only cached neighbour state crosses tiles.

        Per batch: read the cached state of its dependencies, compute all
        layers for the tile, drop entries no later batch reads, then store
        the tile blocks that later batches need.
        """
        cfg = self.cfg
        B = cfg.block_size
        x_in = np.asarray(x_in, dtype=self.dtype)
        lr_up = np.asarray(lr_up, dtype=self.dtype)
        n, H, W, _ = x_in.shape
        if (H // B, W // B) != (plan.h, plan.w) or H % B or W % B:
            raise ValueError(f"plan grid {plan.h}x{plan.w} does not match input {H}x{W}")
        store = KVCacheStore() if store is None else store
        self.last_store = store
        cond, _ = self.conditioning(c_noise, sem)
        _, layer_mods, final_mod = self.modulations(cond)
        out = np.empty((n, H, W, 3), dtype=self.dtype)

        def halo(l, gi, gj):
            return store.get((gi, gj))[l]

        for batch in plan.batches:
            r0, r1 = batch.rows
            c0, c1 = batch.cols
            for dep in batch.deps:
                store.get(dep)
            region = (r0, r1, c0, c1)
            rows = slice(r0 * B, r1 * B)
            cols = slice(c0 * B, c1 * B)
            z, _ = self.embed(x_in[:, rows, cols], lr_up[:, rows, cols])
            layer_kv = []
            for l in range(cfg.layers):
                z, _, kv = self._layer(l, z, layer_mods[l], region, offset, halo, lr_up, False)
                layer_kv.append(kv)
            store.mark()
            img, _ = self._final(z, final_mod, False)
            out[:, rows, cols] = img
            for c in batch.evict:
                store.evict(c)
            for (i, j) in batch.store:
                a, b = i - r0, j - c0
                store.put((i, j), [(kb[:, a, b].copy(), v[:, a, b].copy()) for kb, v in layer_kv])
            store.mark()
        return out
