"""Run orchestration: streamed upsampling, iteration, memory planning, equivalence check."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .diffusion import EDMConfig, denoise, init_noise_from_lr, sample
from .geometry import KVCacheStore, partition, peak_memory_estimate, plan_generation
from .imaging import check_image, resize_bicubic
from .model import DiT, ModelConfig, init_params
from .semantic import ToyEncoder, load_embedding_file, text_guidance
from .training import from_model_range, to_model_range

log = logging.getLogger(__name__)

CONFIG_ENV = "BLOCKDIFF_CONFIG"


class MemoryBudgetError(RuntimeError):
    pass


@dataclass(frozen=True)
class RunConfig:
    edm: EDMConfig = field(default_factory=EDMConfig)
    factor: int = 4
    tiles_n: int = 1
    trajectory: str = "auto"
    seed: int = 0
    prompt_pos: str | None = None
    prompt_neg: str | None = None
    alpha: float = 0.5
    embedding_file: str | None = None
    plain_noise_init: bool = False
    precision: int = 32
    memory_budget_bytes: int | None = None
    streamed: bool = True

    def __post_init__(self):
        if self.factor < 1:
            raise ValueError("factor must be >= 1")
        if self.tiles_n < 1:
            raise ValueError("tiles_n must be >= 1")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["edm"] = self.edm.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        if "edm" in d:
            d["edm"] = EDMConfig(**d["edm"])
        return cls(**d)


def load_config_file(path) -> dict:
    with open(path, encoding="utf-8") as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    allowed = {"run", "model", "train"}
    unknown = set(data) - allowed
    if unknown:
        raise ValueError(f"{path}: unknown config sections {sorted(unknown)}")
    return data


def default_config_path() -> str | None:
    return os.environ.get(CONFIG_ENV)


@dataclass
class MemoryReport:
    h: int
    w: int
    n: int
    trajectory: str
    residency: list[tuple[int, int]]
    high_water_blocks: int
    bound_blocks: int
    m1_bytes: int
    m2_bytes: int
    c_bytes: int
    estimated_bytes: float
    measured_cache_bytes: int | None = None
    plan_text: str = ""

    @property
    def stream_width(self) -> int:
        return self.w if self.trajectory == "row_major" else self.h

    def render(self) -> str:
        lines = [
            self.plan_text,
            f"grid {self.h}x{self.w} blocks, n={self.n}, trajectory={self.trajectory}",
            f"cache high-water {self.high_water_blocks} blocks (bound {self.bound_blocks})",
            f"M1 (working bytes per block) = {self.m1_bytes}",
            f"M2 (cache bytes per block)   = {self.m2_bytes}",
            f"C  (fixed bytes)             = {self.c_bytes}",
            f"estimate n^2*M1 + (w+n)*M2 + C = {self.n ** 2 * self.m1_bytes} + {(self.stream_width + self.n) * self.m2_bytes}"
            f" + {self.c_bytes} = {int(self.estimated_bytes)} bytes",
        ]
        if self.measured_cache_bytes is not None:
            lines.append(f"measured cache high-water = {self.measured_cache_bytes} bytes")
        return "\n".join(l for l in lines if l)


def memory_terms(cfg: ModelConfig, H: int, W: int, itemsize: int, sampler_state_copies: int = 4):
    """(M1, M2, C) in bytes. C holds the full-resolution pixel state kept between sampler steps."""
    m1 = cfg.working_block_bytes(itemsize)
    m2 = cfg.cache_block_bytes(itemsize)
    c = sampler_state_copies * H * W * 3 * itemsize
    return m1, m2, c


def plan_report(H: int, W: int, cfg: ModelConfig, n: int, trajectory: str = "auto", itemsize: int = 4) -> MemoryReport:
    spec = partition(H, W, cfg.block_size, cfg.patch_size)
    plan = plan_generation(spec.h, spec.w, n, trajectory)
    m1, m2, c = memory_terms(cfg, H, W, itemsize)
    # the estimate is stated along the plan's streaming axis
    width = spec.w if plan.trajectory == "row_major" else spec.h
    est = peak_memory_estimate(n, width, m1, m2, c)
    return MemoryReport(spec.h, spec.w, n, plan.trajectory, plan.residency(), plan.high_water(), plan.bound,
                        m1, m2, c, est, plan_text=plan.report())


def _pad_amount(size: int, block: int) -> int:
    return (-size) % block


def reflect_pad(img: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return img
    mode = "reflect" if ph < img.shape[0] and pw < img.shape[1] else "symmetric"
    return np.pad(img, ((0, ph), (0, pw), (0, 0)), mode=mode)


def semantic_embedding(lr: np.ndarray, cfg: ModelConfig, rc: RunConfig, encoder=None) -> np.ndarray:
    if rc.embedding_file:
        sem = load_embedding_file(rc.embedding_file, cfg.semantic_dim).astype(np.float64)
    else:
        encoder = encoder or ToyEncoder(cfg.semantic_dim)
        sem = encoder.encode_image(lr)
    if rc.prompt_pos is not None or rc.prompt_neg is not None:
        encoder = encoder or ToyEncoder(cfg.semantic_dim)
        sem = text_guidance(sem, rc.prompt_pos or "", rc.prompt_neg or "", rc.alpha, encoder)
    return sem


@dataclass
class UpsampleStats:
    high_water_blocks: int = 0
    high_water_bytes: int = 0
    bound_blocks: int = 0
    forward_calls: int = 0
    grid: tuple[int, int] = (0, 0)


def upsample(lr: np.ndarray, model: DiT, rc: RunConfig = RunConfig(), encoder=None, stats: UpsampleStats | None = None,
             target_hw: tuple[int, int] | None = None) -> np.ndarray:
    """Upsample an LR image by ``rc.factor`` (or to ``target_hw``) with streamed tiles."""
    lr = check_image(lr)
    cfg = model.cfg
    B = cfg.block_size
    H, W = target_hw or (lr.shape[0] * rc.factor, lr.shape[1] * rc.factor)
    lr_up = resize_bicubic(lr, H, W)
    ph, pw = _pad_amount(H, B), _pad_amount(W, B)
    if ph or pw:
        log.warning("padding %dx%d target by (%d, %d) to a multiple of block size %d", H, W, ph, pw, B)
    lr_up_p = reflect_pad(lr_up, ph, pw)
    Hp, Wp = lr_up_p.shape[:2]
    spec = partition(Hp, Wp, B, cfg.patch_size)
    plan = plan_generation(spec.h, spec.w, rc.tiles_n, rc.trajectory)
    dtype = model.dtype

    if rc.memory_budget_bytes is not None:
        m1, m2, c = memory_terms(cfg, Hp, Wp, np.dtype(dtype).itemsize)
        width = spec.w if plan.trajectory == "row_major" else spec.h
        need = peak_memory_estimate(rc.tiles_n, width, m1, m2, c)
        if need > rc.memory_budget_bytes:
            n_ok = max((k for k in range(1, rc.tiles_n) if peak_memory_estimate(k, width, m1, m2, c) <= rc.memory_budget_bytes), default=None)
            hint = f"try --tiles-n {n_ok}" if n_ok else "no tile size fits; reduce the image size"
            raise MemoryBudgetError(f"estimated peak {int(need)} bytes exceeds budget {rc.memory_budget_bytes}; {hint}")

    sem = semantic_embedding(lr, cfg, rc, encoder)[None].astype(dtype)
    lr_m = to_model_range(lr_up_p)[None].astype(dtype)
    rng = np.random.default_rng(rc.seed)
    x_T = init_noise_from_lr(lr_m, rc.edm.sigma_max, rng, plain=rc.plain_noise_init).astype(dtype)
    stats = stats if stats is not None else UpsampleStats()
    stats.bound_blocks = plan.bound
    stats.grid = (spec.h, spec.w)

    def forward(x, lr_c, c_noise, s, offset=(0, 0)):
        stats.forward_calls += 1
        if not rc.streamed:
            return model.forward(x, lr_c, c_noise, s, offset=offset)
        store = KVCacheStore()
        out = model.forward_streamed(x, lr_c, c_noise, s, plan, offset=offset, store=store)
        stats.high_water_blocks = max(stats.high_water_blocks, store.high_water)
        stats.high_water_bytes = max(stats.high_water_bytes, store.high_water_bytes)
        return out

    def denoise_fn(x, sigma):
        return denoise(model, x, sigma, lr_m, sem, rc.edm.sigma_data, forward=forward)

    x0 = sample(denoise_fn, x_T, rc.edm)
    return from_model_range(x0[0, :H, :W])


def iterative_upsample(img: np.ndarray, rounds: int, model: DiT, rc: RunConfig = RunConfig(), encoder=None) -> np.ndarray:
    """Feed each round's output back in as the next round's LR input."""
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    seeds = np.random.SeedSequence(rc.seed).generate_state(rounds)
    out = img
    for r in range(rounds):
        rc_r = rc if rounds == 1 else replace(rc, seed=int(seeds[r]))
        out = upsample(out, model, rc_r, encoder)
    return out


@dataclass
class EquivalenceRow:
    h: int
    w: int
    n: int
    max_abs: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_abs <= self.tolerance


TOLERANCE = {64: 1e-10, 32: 1e-5}


def verify_equivalence(cfg: ModelConfig | None = None, seed: int = 0, precision: int = 64,
                       grids=((1, 1), (2, 2), (3, 4), (4, 4)), ns=(1, 2, "max")) -> list[EquivalenceRow]:
    """Random-weight model: whole-grid forward vs streamed forward for each tile size."""
    cfg = cfg or ModelConfig.toy()
    dtype = np.float64 if precision == 64 else np.float32
    model = DiT(cfg, init_params(cfg, seed, "random", dtype=dtype))
    rng = np.random.default_rng(seed)
    B = cfg.block_size
    rows = []
    for h, w in grids:
        x = rng.standard_normal((1, h * B, w * B, 3)).astype(dtype)
        lr = rng.uniform(-1, 1, (1, h * B, w * B, 3)).astype(dtype)
        sem = rng.standard_normal((1, cfg.semantic_dim)).astype(dtype)
        c_noise = np.array([rng.uniform(-1.5, 1.0)])
        offset = (int(rng.integers(64)), int(rng.integers(64)))
        full = model.forward(x, lr, c_noise, sem, offset=offset)
        for n in ns:
            nn = max(h, w) if n == "max" else n
            out = model.forward_streamed(x, lr, c_noise, sem, plan_generation(h, w, nn), offset=offset)
            rows.append(EquivalenceRow(h, w, nn, float(np.max(np.abs(out - full))), TOLERANCE[precision]))
    return rows
