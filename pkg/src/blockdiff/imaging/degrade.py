"""Training-data degradation and crop policies."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .resample import gaussian_blur, resize

CROP_MODES = ("direct_random_crop", "resize_then_crop", "random_choice")


@dataclass(frozen=True)
class DegradationConfig:
    """Blur -> downsample -> additive noise, every draw seeded."""

    blur_sigma_range: tuple[float, float] = (0.2, 2.0)
    resize_kernels: tuple[str, ...] = ("bicubic", "bilinear", "area")
    noise_sigma_range: tuple[float, float] = (0.0, 10.0 / 255.0)
    factor: int = 4
    seed: int = 0

    def __post_init__(self):
        for lo, hi in (self.blur_sigma_range, self.noise_sigma_range):
            if lo > hi or lo < 0:
                raise ValueError(f"bad range ({lo}, {hi})")
        if not self.resize_kernels:
            raise ValueError("need at least one resize kernel")
        if self.factor < 1:
            raise ValueError("factor must be >= 1")


@dataclass(frozen=True)
class CropPolicy:
    target: int = 512
    mode: str = "random_choice"

    def __post_init__(self):
        if self.mode not in CROP_MODES:
            raise ValueError(f"unknown crop mode {self.mode!r}")
        if self.target < 1:
            raise ValueError("crop target must be positive")


def degrade(img: np.ndarray, cfg: DegradationConfig, seed: int | None = None) -> np.ndarray:
    h, w = img.shape[:2]
    f = cfg.factor
    if h % f or w % f:
        raise ValueError(f"image {h}x{w} not divisible by factor {f}")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    blur = rng.uniform(*cfg.blur_sigma_range)
    kernel = cfg.resize_kernels[rng.integers(len(cfg.resize_kernels))]
    noise = rng.uniform(*cfg.noise_sigma_range)
    out = gaussian_blur(img, blur)
    out = resize(out, h // f, w // f, kernel, clip=False)
    if noise > 0:
        out = out + rng.standard_normal(out.shape) * noise
    return np.clip(out, 0.0, 1.0)


def choose_crop_mode(policy: CropPolicy, rng: np.random.Generator) -> str:
    if policy.mode == "random_choice":
        return CROP_MODES[int(rng.integers(2))]
    return policy.mode


def crop_training(img: np.ndarray, policy: CropPolicy, seed) -> np.ndarray:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    mode = choose_crop_mode(policy, rng)
    t = policy.target
    h, w = img.shape[:2]
    if mode == "resize_then_crop":
        short = min(h, w)
        if short != t:
            h, w = max(t, round(h * t / short)), max(t, round(w * t / short))
            img = resize(img, h, w, "bicubic")
    elif h < t or w < t:
        raise ValueError(f"image {h}x{w} smaller than crop target {t}")
    top = int(rng.integers(h - t + 1))
    left = int(rng.integers(w - t + 1))
    return img[top : top + t, left : left + t].copy()
