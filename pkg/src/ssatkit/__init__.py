"""Boundary-focused data selection and guided generation for semi-supervised adversarial training."""

from . import advtrain, clustering, data, diffcore, diffusion, models, selection

__version__ = "0.1.0"

__all__ = ["advtrain", "clustering", "data", "diffcore", "diffusion", "models", "selection"]
