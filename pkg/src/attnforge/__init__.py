"""attnforge: train a small attention-based caption generator on
synthetic scenes and force its spatial attention at generation time."""

__version__ = "0.1.0"
