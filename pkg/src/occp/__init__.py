"""Two-stage cut inference with power-divergence penalties."""

__version__ = "0.1.0"
