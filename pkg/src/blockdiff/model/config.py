from __future__ import annotations

from dataclasses import asdict, dataclass, fields


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    hidden: int = 64
    heads: int = 4
    head_dim: int = 16
    ffn_dim: int = 256
    block_size: int = 32
    patch_size: int = 4
    in_channels: int = 6
    semantic_dim: int = 32
    rope_base: float = 10000.0
    max_positions: int = 4096
    time_freq_dim: int = 64
    norm_eps: float = 1e-6

    def __post_init__(self):
        if self.heads * self.head_dim != self.hidden:
            raise ValueError(f"heads * head_dim ({self.heads}*{self.head_dim}) != hidden {self.hidden}")
        if self.head_dim % 4:
            raise ValueError("head_dim must be divisible by 4 (x/y halves of rotatable pairs)")
        if self.block_size % self.patch_size:
            raise ValueError("block_size must be divisible by patch_size")
        if self.in_channels != 6:
            raise ValueError("in_channels is fixed at 6 (noisy RGB + upsampled LR RGB)")
        if self.layers < 1 or self.time_freq_dim % 2:
            raise ValueError("need layers >= 1 and an even time_freq_dim")

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def full(cls, **overrides) -> "ModelConfig":
        base = dict(
            layers=28, hidden=1280, heads=16, head_dim=80, ffn_dim=5120,
            block_size=128, patch_size=4, semantic_dim=768, time_freq_dim=256,
        )
        base.update(overrides)
        return cls(**base)

    @property
    def patches_per_side(self) -> int:
        return self.block_size // self.patch_size

    @property
    def tokens_per_block(self) -> int:
        return self.patches_per_side**2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def cache_block_bytes(self, itemsize: int) -> int:
        """Bytes of one block's cached state over all layers (key base + value)."""
        return self.layers * 2 * self.tokens_per_block * self.hidden * itemsize

    def working_block_bytes(self, itemsize: int) -> int:
        """Rough per-block activation footprint while a tile is being computed."""
        t, d = self.tokens_per_block, self.hidden
        per_layer = t * (10 * d + 2 * self.ffn_dim) + 2 * self.heads * t * 4 * t
        return (per_layer + self.layers * 2 * t * d) * itemsize
