"""Toy training loop: crop -> degrade -> bicubic-up LR -> EDM loss -> Adam."""
from __future__ import annotations

import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .checkpoint import checkpoint_load, checkpoint_save
from .diffusion import EDMConfig, edm_loss
from .imaging import CropPolicy, DegradationConfig, crop_training, degrade, load_image, resize_bicubic
from .model import DiT, ModelConfig, init_params
from .semantic import toy_image_encode

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float | None = 1.0
    warmup_steps: int = 0
    lr_decay: str = "none"  # or "linear"
    crop: int = 64
    crop_mode: str = "random_choice"
    factor: int = 4
    blur_sigma_range: tuple[float, float] = (0.0, 0.0)
    noise_sigma_range: tuple[float, float] = (0.0, 0.0)
    resize_kernels: tuple[str, ...] = ("bicubic",)
    random_start: bool = True
    precision: int = 32
    seed: int = 0
    checkpoint_every: int = 0

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        """Large-scale hyperparameters (peak lr 1e-4, 10k warmup, linear decay, clip 0.1, wd 1e-4)."""
        base = dict(
            steps=1_000_000, batch_size=320, lr=1e-4, weight_decay=1e-4, grad_clip=0.1,
            warmup_steps=10_000, lr_decay="linear", crop=512, blur_sigma_range=(0.2, 2.0),
            noise_sigma_range=(0.0, 10.0 / 255.0), resize_kernels=("bicubic", "bilinear", "area"),
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        for k in ("blur_sigma_range", "noise_sigma_range", "resize_kernels"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def degradation(self) -> DegradationConfig:
        return DegradationConfig(self.blur_sigma_range, self.resize_kernels, self.noise_sigma_range, self.factor)


def to_model_range(img):
    return np.asarray(img) * 2.0 - 1.0


def from_model_range(x):
    return np.clip((np.asarray(x, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)


class Adam:
    """Adam with decoupled weight decay (decay skipped for 1-d tensors)."""

    def __init__(self, params, cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def lr_at(self, step: int) -> float:
        c = self.cfg
        lr = c.lr
        if c.warmup_steps and step < c.warmup_steps:
            lr *= (step + 1) / c.warmup_steps
        elif c.lr_decay == "linear":
            span = max(1, c.steps - c.warmup_steps)
            lr *= max(0.0, 1.0 - (step - c.warmup_steps) / span)
        return lr

    def step(self, params, grads):
        c = self.cfg
        self.t += 1
        lr = self.lr_at(self.t - 1)
        b1, b2 = c.beta1, c.beta2
        corr1 = 1 - b1**self.t
        corr2 = 1 - b2**self.t
        for k, p in params.items():
            g = grads[k].astype(p.dtype, copy=False)
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            upd = (m / corr1) / (np.sqrt(v / corr2) + c.eps)
            if c.weight_decay and p.ndim > 1:
                upd = upd + c.weight_decay * p
            p -= (lr * upd).astype(p.dtype)


def clip_grads(grads, max_norm):
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if not math.isfinite(total):
        raise FloatingPointError("non-finite gradient norm")
    if max_norm is not None and total > max_norm:
        s = max_norm / total
        grads = {k: g * s for k, g in grads.items()}
    return grads, total


@dataclass
class TrainState:
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    edm_cfg: EDMConfig
    params: dict
    opt: Adam
    rng: np.random.Generator
    step: int = 0
    history: list = field(default_factory=list)

    @property
    def dtype(self):
        return np.float64 if self.train_cfg.precision == 64 else np.float32


def new_state(model_cfg: ModelConfig, train_cfg: TrainConfig, edm_cfg: EDMConfig = EDMConfig(), init_seed: int | None = None) -> TrainState:
    dtype = np.float64 if train_cfg.precision == 64 else np.float32
    params = init_params(model_cfg, train_cfg.seed if init_seed is None else init_seed, dtype=dtype)
    return TrainState(model_cfg, train_cfg, edm_cfg, params, Adam(params, train_cfg), np.random.default_rng(train_cfg.seed))


def make_example(img, tc: TrainConfig, rng: np.random.Generator, semantic_dim: int):
    hr = crop_training(img, CropPolicy(tc.crop, tc.crop_mode), rng)
    lr = degrade(hr, tc.degradation(), seed=int(rng.integers(2**31)))
    lr_up = resize_bicubic(lr, tc.crop, tc.crop)
    sem = toy_image_encode(lr, semantic_dim)
    return to_model_range(hr), to_model_range(lr_up), sem


def train_step(state: TrainState, images, sem_cache=None) -> float:
    tc, mc = state.train_cfg, state.model_cfg
    rng = state.rng
    idx = rng.integers(len(images), size=tc.batch_size)
    x0, lr_up, sem = zip(*(make_example(images[i], tc, rng, mc.semantic_dim) for i in idx))
    dt = state.dtype
    x0 = np.stack(x0).astype(dt)
    lr_up = np.stack(lr_up).astype(dt)
    sem = np.stack(sem).astype(dt)
    offset = (0, 0)
    if tc.random_start:
        span = mc.max_positions - (tc.crop // mc.patch_size)
        offset = (int(rng.integers(span + 1)), int(rng.integers(span + 1)))
    net = DiT(mc, state.params)
    loss, grads = edm_loss(net, x0, lr_up, sem, rng, state.edm_cfg, offset=offset, grad=True)
    grads, gnorm = clip_grads(grads, tc.grad_clip)
    state.opt.step(state.params, grads)
    state.step += 1
    state.history.append((state.step, loss, gnorm, offset))
    return loss


def save_state(state: TrainState, path) -> None:
    extra = {f"opt.m.{k}": v for k, v in state.opt.m.items()}
    extra.update({f"opt.v.{k}": v for k, v in state.opt.v.items()})
    meta = {
        "step": state.step,
        "opt_t": state.opt.t,
        "rng": state.rng.bit_generator.state,
        "train_config": state.train_cfg.to_dict(),
        "edm_config": state.edm_cfg.to_dict(),
    }
    checkpoint_save(path, state.model_cfg, state.params, extra, meta)


def load_state(path, train_cfg: TrainConfig | None = None) -> TrainState:
    cfg, params, extra, meta = checkpoint_load(path)
    tc = train_cfg or TrainConfig.from_dict(meta["train_config"])
    edm = EDMConfig(**meta.get("edm_config", {}))
    opt = Adam(params, tc)
    for k in params:
        if f"opt.m.{k}" in extra:
            opt.m[k] = extra[f"opt.m.{k}"]
            opt.v[k] = extra[f"opt.v.{k}"]
    opt.t = int(meta.get("opt_t", 0))
    rng = np.random.default_rng()
    if "rng" in meta:
        rng.bit_generator.state = meta["rng"]
    return TrainState(cfg, tc, edm, params, opt, rng, int(meta.get("step", 0)))


def load_dataset(path, min_size: int) -> list[np.ndarray]:
    names = sorted(n for n in os.listdir(path) if n.lower().endswith((".png", ".ppm", ".pnm")))
    images = [load_image(os.path.join(path, n)) for n in names]
    images = [im for im in images if min(im.shape[:2]) >= min_size]
    if not images:
        raise ValueError(f"no usable images (>= {min_size}px) in {path}")
    return images


def train_toy(images, out_path=None, model_cfg: ModelConfig | None = None, train_cfg: TrainConfig = TrainConfig(),
              edm_cfg: EDMConfig = EDMConfig(), state: TrainState | None = None, log_every: int = 50) -> TrainState:
    if isinstance(images, (str, os.PathLike)):
        images = load_dataset(images, train_cfg.crop)
    if len(images) == 0:
        raise ValueError("empty dataset")
    if state is None:
        state = new_state(model_cfg or ModelConfig.toy(), train_cfg, edm_cfg)
    while state.step < state.train_cfg.steps:
        loss = train_step(state, images)
        if log_every and state.step % log_every == 0:
            recent = [h[1] for h in state.history[-log_every:]]
            log.info("step %d loss %.4f", state.step, float(np.mean(recent)))
        every = state.train_cfg.checkpoint_every
        if out_path and every and state.step % every == 0:
            save_state(state, out_path)
    if out_path:
        save_state(state, out_path)
    return state
