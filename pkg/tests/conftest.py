import numpy as np
import pytest

from blockdiff.model import DiT, ModelConfig, init_params


def make_model(cfg=None, seed=0, dtype=np.float64, scheme="random"):
    cfg = cfg or ModelConfig.toy()
    return DiT(cfg, init_params(cfg, seed, scheme, dtype=dtype))


def make_inputs(cfg, h, w, seed=0, n=1, dtype=np.float64):
    rng = np.random.default_rng(seed)
    B = cfg.block_size
    x = rng.standard_normal((n, h * B, w * B, 3)).astype(dtype)
    lr = rng.uniform(-1, 1, (n, h * B, w * B, 3)).astype(dtype)
    sem = rng.standard_normal((n, cfg.semantic_dim)).astype(dtype)
    c_noise = rng.uniform(-1.5, 1.0, n)
    return x, lr, c_noise, sem


@pytest.fixture(scope="session")
def toy64():
    return make_model()


@pytest.fixture(scope="session")
def small_cfg():
    """Tiny geometry (8-pixel blocks) for brute-force oracles."""
    return ModelConfig(layers=2, hidden=32, heads=2, head_dim=16, ffn_dim=64, block_size=8, patch_size=4,
                       semantic_dim=8, time_freq_dim=16, max_positions=256)
