"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest -v -s tests/test_acceptance.py`` to see the lines inline;
they are also echoed to the terminal summary.
"""
import contextlib
import itertools
import time

import numpy as np
import pytest

from blockdiff import diffusion as D
from blockdiff.checkpoint import checkpoint_load, checkpoint_save
from blockdiff.engine import RunConfig, upsample
from blockdiff.geometry import KVCacheStore, plan_generation
from blockdiff.imaging import load_image, psnr, quantize, resize, resize_bicubic, save_image
from blockdiff.model import DiT, ModelConfig, init_params
from blockdiff.model.params import PARAM_CLASSES, param_class
from blockdiff.model.rope import RoPETable, apply_rope
from blockdiff.semantic import ToyEncoder, load_embedding_file, normalize, save_embedding_file, text_guidance
from blockdiff.textures import texture_set
from blockdiff.training import TrainConfig, new_state, train_step

RESULTS: dict[int, str] = {}


@contextlib.contextmanager
def criterion(k: int, title: str, capsys):
    t0 = time.perf_counter()
    notes: list[str] = []
    try:
        yield notes
    except BaseException:
        line = f"CRITERION {k} FAIL {title} ({time.perf_counter() - t0:.1f}s) {'; '.join(notes)}"
        RESULTS[k] = line
        with capsys.disabled():
            print("\n" + line)
        raise
    line = f"CRITERION {k} PASS {title} ({time.perf_counter() - t0:.1f}s) {'; '.join(notes)}"
    RESULTS[k] = line
    with capsys.disabled():
        print("\n" + line)


def tiny_cfg(**kw):
    base = dict(layers=1, hidden=8, heads=2, head_dim=4, ffn_dim=8, block_size=4, patch_size=4,
                semantic_dim=4, time_freq_dim=4, max_positions=64)
    base.update(kw)
    return ModelConfig(**base)


def random_inputs(cfg, h, w, rng, dtype):
    B = cfg.block_size
    x = rng.standard_normal((1, h * B, w * B, 3)).astype(dtype)
    lr = rng.uniform(-1, 1, (1, h * B, w * B, 3)).astype(dtype)
    sem = rng.standard_normal((1, cfg.semantic_dim)).astype(dtype)
    return x, lr, np.array([rng.uniform(-1.5, 1.0)]), sem


def test_criterion_01_streamed_equivalence(capsys):
    with criterion(1, "streamed forward == full forward", capsys) as notes:
        t0 = time.perf_counter()
        cfg = ModelConfig.toy()
        for dtype, tol in ((np.float64, 1e-10), (np.float32, 1e-5)):
            model = DiT(cfg, init_params(cfg, 7, "random", dtype=dtype))
            rng = np.random.default_rng(1)
            worst = 0.0
            for h, w in ((1, 1), (1, 3), (2, 2), (3, 2), (4, 4)):
                x, lr, cn, sem = random_inputs(cfg, h, w, rng, dtype)
                off = (int(rng.integers(50)), int(rng.integers(50)))
                full = model.forward(x, lr, cn, sem, offset=off)
                for n in (1, 2, 4):
                    out = model.forward_streamed(x, lr, cn, sem, plan_generation(h, w, n), offset=off)
                    worst = max(worst, float(np.max(np.abs(out - full))))
            notes.append(f"{np.dtype(dtype).name} max_abs={worst:.2e} tol={tol:.0e}")
            assert worst <= tol
        assert time.perf_counter() - t0 < 30


def test_criterion_02_sampling_equivalence(capsys):
    with criterion(2, "20-step Heun streamed vs full sampling", capsys) as notes:
        t0 = time.perf_counter()
        cfg = ModelConfig.toy()
        model = DiT(cfg, init_params(cfg, 3, "random", dtype=np.float32))
        lr = np.random.default_rng(2).random((8, 16, 3))  # -> 32 x 64: one row of two blocks
        a = upsample(lr, model, RunConfig(edm=D.EDMConfig(), tiles_n=1, seed=5))
        b = upsample(lr, model, RunConfig(edm=D.EDMConfig(), seed=5, streamed=False))
        err = float(np.max(np.abs(a - b)))
        notes.append(f"max per-pixel diff={err:.2e}")
        assert a.shape == (32, 64, 3)
        assert err <= 1e-4
        assert time.perf_counter() - t0 < 120


def test_criterion_03_cache_bound(capsys):
    with criterion(3, "cache residency <= w+n, reaches w when h > n", capsys) as notes:
        t0 = time.perf_counter()
        cfg = tiny_cfg()
        model = DiT(cfg, init_params(cfg, 0, "random", dtype=np.float32))
        rng = np.random.default_rng(0)
        runs = 0
        for h, w, n in itertools.product(range(1, 9), range(1, 9), range(1, 5)):
            x, lr, cn, sem = random_inputs(cfg, h, w, rng, np.float32)
            store = KVCacheStore()
            model.forward_streamed(x, lr, cn, sem, plan_generation(h, w, n, "row_major"), store=store)
            assert store.high_water <= w + n, (h, w, n, store.high_water)
            if h > n:
                assert max(store.history) >= w, (h, w, n, store.history)
            auto = KVCacheStore()
            model.forward_streamed(x, lr, cn, sem, plan_generation(h, w, n), store=auto)
            assert auto.high_water <= min(h, w) + n
            runs += 2
        notes.append(f"{runs} instrumented runs")
        assert time.perf_counter() - t0 < 60


def r_squared(x, y, deg):
    coef = np.polyfit(x, y, deg)
    resid = y - np.polyval(coef, x)
    return 1 - float(np.sum(resid**2) / np.sum((y - y.mean()) ** 2)), coef


def test_criterion_04_memory_linearity(capsys, monkeypatch):
    with criterion(4, "streamed cache linear in width, whole-image state quadratic", capsys) as notes:
        t0 = time.perf_counter()
        cfg = ModelConfig.toy()
        model = DiT(cfg, init_params(cfg, 0, "random", dtype=np.float32))
        produced = [0]
        inner = model._self_attention

        def counting(*a, **k):
            out = inner(*a, **k)
            kb, v = out[2]
            produced[0] += kb.nbytes + v.nbytes
            return out

        monkeypatch.setattr(model, "_self_attention", counting)
        widths = np.array([8, 16, 32, 64])
        peak, whole = [], []
        rng = np.random.default_rng(0)
        for w in widths:
            x, lr, cn, sem = random_inputs(cfg, int(w), int(w), rng, np.float32)
            store = KVCacheStore()
            produced[0] = 0
            model.forward_streamed(x, lr, cn, sem, plan_generation(int(w), int(w), 1), store=store)
            peak.append(store.high_water_bytes)
            whole.append(produced[0])
        peak, whole = np.array(peak, float), np.array(whole, float)
        r_lin, _ = r_squared(widths, peak, 1)
        r_quad, coef = r_squared(widths, whole, 2)
        r_whole_lin, _ = r_squared(widths, whole, 1)
        notes.append(f"cache R2(line)={r_lin:.5f}; whole-image R2(quad)={r_quad:.5f} vs R2(line)={r_whole_lin:.4f}")
        assert r_lin > 0.99
        assert r_quad > 0.99 and coef[0] > 0 and r_whole_lin < r_quad
        assert time.perf_counter() - t0 < 300


def test_criterion_05_rope(capsys):
    with criterion(5, "RoPE logits invariant to start offset; random start used in training", capsys) as notes:
        rope = RoPETable(16, 4096)
        rng = np.random.default_rng(0)
        q = rng.standard_normal((200, 16))
        k = rng.standard_normal((200, 16))
        px, py = rng.integers(0, 64, (2, 200))
        kx, ky = rng.integers(0, 64, (2, 200))
        worst = 0.0
        base = np.sum(apply_rope(q, *rope.lookup(px, py)) * apply_rope(k, *rope.lookup(kx, ky)), -1)
        for ox, oy in rng.integers(0, 4000, (20, 2)):
            shifted = np.sum(apply_rope(q, *rope.lookup(px + ox, py + oy)) * apply_rope(k, *rope.lookup(kx + ox, ky + oy)), -1)
            worst = max(worst, float(np.max(np.abs(shifted - base))))
        notes.append(f"logit max_abs={worst:.1e}")
        assert worst <= 1e-5
        cfg = tiny_cfg(block_size=8, max_positions=256)
        model = DiT(cfg, init_params(cfg, 1, "random", dtype=np.float64))
        x, lr, cn, sem = random_inputs(cfg, 2, 2, rng, np.float64)
        a = model.forward(x, lr, cn, sem, offset=(0, 0))
        b = model.forward(x, lr, cn, sem, offset=(117, 33))
        notes.append(f"network output shift max_abs={np.max(np.abs(a - b)):.1e}")
        assert np.max(np.abs(a - b)) <= 1e-5
        st = new_state(cfg, TrainConfig(steps=5, batch_size=1, crop=16, seed=3))
        imgs = list(texture_set(2, size=16))
        for _ in range(5):
            train_step(st, imgs)
        offsets = [h[3] for h in st.history]
        notes.append(f"training offsets {offsets}")
        assert any(o != (0, 0) for o in offsets)


def test_criterion_06_gradients(capsys):
    with criterion(6, "finite-difference gradient check per parameter class", capsys) as notes:
        t0 = time.perf_counter()
        cfg = ModelConfig.toy()
        params = init_params(cfg, 11, "random", dtype=np.float64)
        net = DiT(cfg, params)
        rng = np.random.default_rng(4)
        x, lr, cn, sem = random_inputs(cfg, 2, 2, rng, np.float64)
        R = rng.standard_normal(x.shape)

        def loss():
            return float(np.sum(net.forward(x, lr, cn, sem, offset=(3, 5)) * R))

        out, ctx = net.forward(x, lr, cn, sem, offset=(3, 5), keep=True)
        grads = net.backward(R, ctx)
        worst = {}
        for cls in PARAM_CLASSES:
            names = [n for n in params if param_class(n) == cls]
            assert names, cls
            dirs = {n: rng.standard_normal(params[n].shape) for n in names}
            ana = sum(float(np.sum(grads[n] * dirs[n])) for n in names)
            orig = {n: params[n].copy() for n in names}
            vals = []
            eps = 1e-5
            for sgn in (1, -1):
                for n in names:
                    params[n][...] = orig[n] + sgn * eps * dirs[n]
                vals.append(loss())
            for n in names:
                params[n][...] = orig[n]
            num = (vals[0] - vals[1]) / (2 * eps)
            worst[cls] = abs(num - ana) / max(abs(num), abs(ana))
        notes.append(", ".join(f"{c}={e:.1e}" for c, e in worst.items()))
        assert max(worst.values()) <= 1e-4
        assert time.perf_counter() - t0 < 300


def test_criterion_07_edm_identities(capsys):
    with criterion(7, "EDM weighting, training-noise moments, oracle sampler", capsys) as notes:
        sig = np.logspace(-3, 3, 20001)
        ident = float(np.max(np.abs(D.loss_weight(sig) * D.c_out(sig) ** 2 - 1)))
        notes.append(f"|lambda*c_out^2-1|={ident:.1e}")
        assert ident <= 1e-12
        ls = np.log(D.sample_train_sigma(np.random.default_rng(0), 200_000))
        notes.append(f"ln sigma mean={ls.mean():.4f} std={ls.std():.4f}")
        assert abs(ls.mean() + 1.0) <= 0.02 * 1.0
        assert abs(ls.std() - 1.4) <= 0.02 * 1.4
        rng = np.random.default_rng(1)
        x0 = rng.uniform(-1, 1, (1, 16, 16, 3))
        worst = 0.0
        for mode in ("euler", "heun"):
            out = D.sample(lambda x, s: x0, x0 + 80 * rng.standard_normal(x0.shape), D.EDMConfig(sampler=mode))
            worst = max(worst, float(np.max(np.abs(out - x0))))
        notes.append(f"oracle sampler max_abs={worst:.1e}")
        assert worst <= 1e-10


# Toy benchmark: training budget sized to finish well inside 30 minutes on one core.
TOY_TRAIN = TrainConfig(steps=2400, batch_size=8, lr=2e-3, warmup_steps=100, lr_decay="linear", crop=64, seed=0)
TOY_EVAL = D.EDMConfig()


def test_criterion_08_learning_signal(capsys):
    with criterion(8, "trained toy model beats bicubic by >= 0.5 dB on 50 held-out textures", capsys) as notes:
        t0 = time.perf_counter()
        train = list(texture_set(500))
        test = texture_set(50, start=100_000)
        cfg = ModelConfig.toy()
        st = new_state(cfg, TOY_TRAIN)
        while st.step < TOY_TRAIN.steps:
            train_step(st, train)
        t_train = time.perf_counter() - t0
        model = DiT(cfg, st.params)
        ours, base = [], []
        for i, hr in enumerate(test):
            lr = resize(hr, 16, 16, "bicubic")
            ours.append(psnr(hr, upsample(lr, model, RunConfig(edm=TOY_EVAL, seed=i))))
            base.append(psnr(hr, resize_bicubic(lr, 64, 64)))
        gain = float(np.mean(ours) - np.mean(base))
        total = time.perf_counter() - t0
        notes.append(f"model {np.mean(ours):.2f} dB vs bicubic {np.mean(base):.2f} dB (gain {gain:+.2f});"
                     f" train {t_train:.0f}s total {total:.0f}s")
        assert gain >= 0.5
        assert total < 30 * 60


def test_criterion_09_guidance(capsys):
    with criterion(9, "text guidance identities", capsys) as notes:
        enc = ToyEncoder(64)
        rng = np.random.default_rng(0)
        worst = [0.0, 0.0, 0.0]
        for _ in range(50):
            img = normalize(rng.standard_normal(64))
            alpha = float(rng.uniform(-2, 2))
            worst[0] = max(worst[0], float(np.max(np.abs(text_guidance(img, "crisp", "soft", 0.0, enc) - img))))
            worst[1] = max(worst[1], float(np.max(np.abs(text_guidance(img, "same", "same", alpha, enc) - img))))
            worst[2] = max(worst[2], abs(float(np.linalg.norm(text_guidance(img, "crisp", "soft", alpha, enc))) - 1))
        notes.append(f"alpha=0 {worst[0]:.1e}, cancel {worst[1]:.1e}, norm {worst[2]:.1e}")
        assert max(worst) <= 1e-6


def test_criterion_10_determinism_formats(capsys, tmp_path):
    with criterion(10, "bitwise round-trips and reproducible runs", capsys) as notes:
        cfg = tiny_cfg(block_size=8, max_positions=256)
        params = init_params(cfg, 5, "random", dtype=np.float32)
        checkpoint_save(tmp_path / "m.infd", cfg, params)
        _, back, _, _ = checkpoint_load(tmp_path / "m.infd")
        assert all(back[k].tobytes() == v.tobytes() for k, v in params.items())
        v = np.random.default_rng(1).standard_normal(77).astype(np.float32)
        save_embedding_file(v, tmp_path / "e.semb")
        assert load_embedding_file(tmp_path / "e.semb").tobytes() == v.tobytes()
        img = np.random.default_rng(2).random((13, 17, 3))
        for ext in ("png", "ppm"):
            save_image(img, tmp_path / f"i.{ext}")
            assert np.array_equal(load_image(tmp_path / f"i.{ext}"), quantize(img))
        notes.append("checkpoint/SEMB bitwise, PNG/PPM == quantize")
        model = DiT(cfg, params)
        lr = np.random.default_rng(3).random((6, 10, 3))
        rc = RunConfig(edm=D.EDMConfig(steps=4), tiles_n=2, seed=8)
        assert np.array_equal(upsample(lr, model, rc), upsample(lr, model, rc))
        imgs = list(texture_set(3, size=16))
        runs = []
        for _ in range(2):
            st = new_state(cfg, TrainConfig(steps=3, batch_size=2, crop=16, seed=4))
            for _ in range(3):
                train_step(st, imgs)
            runs.append(st)
        assert all(runs[0].params[k].tobytes() == runs[1].params[k].tobytes() for k in params)
        notes.append("upsample and training reproducible under fixed seed")


def test_zz_summary(capsys):
    with capsys.disabled():
        print("\nacceptance summary:")
        for k in sorted(RESULTS):
            print("  " + RESULTS[k])
