"""EDM preconditioning, training loss, rho-spaced schedule and deterministic samplers."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class EDMConfig:
    sigma_data: float = 0.5
    p_mean: float = -1.0
    p_std: float = 1.4
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    steps: int = 20
    sampler: str = "heun"

    def __post_init__(self):
        if not self.sigma_min < self.sigma_max:
            raise ValueError("sigma_min must be below sigma_max")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.p_std <= 0:
            raise ValueError("p_std must be positive")
        if self.sampler not in ("euler", "heun"):
            raise ValueError(f"unknown sampler {self.sampler!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def c_skip(sigma, sigma_data=0.5):
    return sigma_data**2 / (sigma**2 + sigma_data**2)


def c_out(sigma, sigma_data=0.5):
    return sigma * sigma_data / np.sqrt(sigma**2 + sigma_data**2)


def c_in(sigma, sigma_data=0.5):
    return 1.0 / np.sqrt(sigma**2 + sigma_data**2)


def c_noise(sigma):
    return np.log(sigma) / 4.0


def loss_weight(sigma, sigma_data=0.5):
    return (sigma**2 + sigma_data**2) / (sigma * sigma_data) ** 2


def sample_train_sigma(rng: np.random.Generator, size=None, cfg: EDMConfig = EDMConfig()):
    """Log-normal training noise level: ln(sigma) ~ N(p_mean, p_std^2)."""
    return np.exp(cfg.p_mean + cfg.p_std * rng.standard_normal(size))


def _per_sample(v, ndim):
    v = np.asarray(v, dtype=np.float64)
    return v.reshape(v.shape + (1,) * (ndim - v.ndim)) if v.ndim else v


def denoise(net, x_noisy, sigma, lr_up, sem, sigma_data=0.5, forward=None, offset=(0, 0)):
    """Preconditioned denoiser x0_hat = c_skip x + c_out F(c_in x, lr, c_noise, sem).

    ``forward`` overrides the network call (e.g. a streamed forward); it takes
    the same arguments as ``net.forward``.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("denoiser requires sigma > 0")
    n = x_noisy.shape[0]
    sig = np.broadcast_to(sigma, (n,))
    s = _per_sample(sig, x_noisy.ndim)
    fwd = forward or net.forward
    F = fwd((c_in(s, sigma_data) * x_noisy).astype(x_noisy.dtype), lr_up, c_noise(sig), sem, offset=offset)
    return (c_skip(s, sigma_data) * x_noisy + c_out(s, sigma_data) * F).astype(x_noisy.dtype)


def edm_loss(net, x0, lr_up, sem, rng, cfg: EDMConfig = EDMConfig(), offset=(0, 0), grad=False):
    """lambda(sigma)-weighted denoising MSE, averaged over the batch.

    With ``grad=True`` returns (loss, grads) where grads come from
    ``net.backward``.
    """
    n = x0.shape[0]
    sigma = sample_train_sigma(rng, n, cfg)
    noise = rng.standard_normal(x0.shape) * _per_sample(sigma, x0.ndim)
    x_noisy = x0 + noise
    s = _per_sample(sigma, x0.ndim)
    sd = cfg.sigma_data
    dtype = net.dtype
    res = net.forward((c_in(s, sd) * x_noisy).astype(dtype), lr_up, c_noise(sigma), sem, offset=offset, keep=grad)
    F, ctx = res if grad else (res, None)
    D = c_skip(s, sd) * x_noisy + c_out(s, sd) * F
    err = D - x0
    per_pixel = x0[0].size
    lam = loss_weight(s, sd)
    loss = float(np.sum(lam * err**2) / (per_pixel * n))
    if not grad:
        return loss
    dF = (lam * 2.0 * err / (per_pixel * n) * c_out(s, sd)).astype(dtype)
    return loss, net.backward(dF, ctx)


def sigma_schedule(cfg: EDMConfig = EDMConfig()) -> np.ndarray:
    """rho-spaced noise levels from sigma_max down to sigma_min, then 0."""
    if cfg.steps == 1:
        return np.array([cfg.sigma_max, 0.0])
    i = np.arange(cfg.steps)
    inv = 1.0 / cfg.rho
    hi, lo = cfg.sigma_max**inv, cfg.sigma_min**inv
    sig = (hi + i / (cfg.steps - 1) * (lo - hi)) ** cfg.rho
    sig[0], sig[-1] = cfg.sigma_max, cfg.sigma_min
    return np.append(sig, 0.0)


def sampler_step(x, sigma, sigma_next, denoise_fn: Callable, mode: str = "heun"):
    """One deterministic Euler or Heun step of the probability-flow ODE."""
    d = (x - denoise_fn(x, sigma)) / sigma
    x_next = x + (sigma_next - sigma) * d
    if mode == "heun" and sigma_next > 0:
        d2 = (x_next - denoise_fn(x_next, sigma_next)) / sigma_next
        x_next = x + (sigma_next - sigma) * 0.5 * (d + d2)
    elif mode not in ("euler", "heun"):
        raise ValueError(f"unknown sampler {mode!r}")
    return x_next


def sample(denoise_fn: Callable, x_T, cfg: EDMConfig = EDMConfig(), sigmas=None, callback=None):
    sigmas = sigma_schedule(cfg) if sigmas is None else sigmas
    x = x_T
    for i in range(len(sigmas) - 1):
        x = sampler_step(x, float(sigmas[i]), float(sigmas[i + 1]), denoise_fn, cfg.sampler)
        if callback is not None:
            callback(i, x)
    return x


def init_noise_from_lr(lr_up, sigma_max, rng: np.random.Generator, plain=False):
    """x_T = lr_up + sigma_max * eps (or sigma_max * eps alone with ``plain``)."""
    eps = rng.standard_normal(np.shape(lr_up))
    if plain:
        return sigma_max * eps
    return lr_up + sigma_max * eps
