from .attention import qk_norm_attention
from .config import ModelConfig
from .network import DiT, SLOTS, timestep_features
from .params import PARAM_CLASSES, init_params, param_class, param_shapes
from .rope import RoPETable, apply_rope, block_positions

__all__ = [
    "DiT",
    "ModelConfig",
    "PARAM_CLASSES",
    "RoPETable",
    "SLOTS",
    "apply_rope",
    "block_positions",
    "init_params",
    "param_class",
    "param_shapes",
    "qk_norm_attention",
    "timestep_features",
]
