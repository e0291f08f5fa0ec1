"""Memory-bounded diffusion-transformer upsampling with unidirectional block attention."""

__version__ = "0.1.0"
