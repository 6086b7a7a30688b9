"""Parameter registration and application helpers for linear/conv layers.

Weights are initialized uniformly in +/- sqrt(1/fan_in); biases start at
zero. Parameters live in a ParamStore under dotted names like
"fusion.head.fc1.weight" so checkpoints stay flat and deterministic.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor

__all__ = ["add_linear", "linear", "add_conv", "conv", "uniform_init"]


def uniform_init(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def add_linear(
    store: ParamStore, name: str, fan_in: int, fan_out: int, rng: np.random.Generator
) -> None:
    store.add(f"{name}.weight", Tensor(uniform_init(rng, fan_in, (fan_in, fan_out)), requires_grad=True))
    store.add(f"{name}.bias", Tensor(np.zeros(fan_out), requires_grad=True))


def linear(store: ParamStore, name: str, x: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, store[f"{name}.weight"]), store[f"{name}.bias"])


def add_conv(
    store: ParamStore,
    name: str,
    in_channels: int,
    out_channels: int,
    kernel: int,
    rng: np.random.Generator,
) -> None:
    fan_in = in_channels * kernel * kernel
    store.add(
        f"{name}.weight",
        Tensor(uniform_init(rng, fan_in, (out_channels, in_channels, kernel, kernel)), requires_grad=True),
    )
    store.add(f"{name}.bias", Tensor(np.zeros(out_channels), requires_grad=True))


def conv(store: ParamStore, name: str, x: Tensor, stride: int = 2, padding: int = 1) -> Tensor:
    return ad.conv2d(x, store[f"{name}.weight"], store[f"{name}.bias"], stride=stride, padding=padding)
