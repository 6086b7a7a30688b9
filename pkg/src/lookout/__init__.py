"""Proactive navigation-failure prediction for row-crop robots.

Fuses LiDAR, camera, and planned-path features with a bounded recurrent
latent state through occlusion-biased multi-head attention, and predicts
per-frame probabilities of navigation failure over a fixed future horizon.
"""
from .autodiff import ParamStore, Tensor, no_grad
from .optim import AdamState, adam_step, gradient_check

__version__ = "0.1.0"

__all__ = [
    "ParamStore",
    "Tensor",
    "no_grad",
    "AdamState",
    "adam_step",
    "gradient_check",
    "__version__",
]
