"""Training-free few-shot class-incremental learning with a frozen conditional diffusion model."""

__version__ = "0.1.0"
