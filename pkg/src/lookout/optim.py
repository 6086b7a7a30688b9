"""Adam optimizer and a central-difference gradient checker."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .autodiff import ParamStore, Tensor, no_grad

__all__ = ["AdamState", "adam_step", "gradient_check", "GradientCheckError"]


@dataclass
class AdamState:
    """Per-parameter moment buffers plus hyperparameters.

    Weight decay is applied classically, as a gradient addition g + wd * theta.
    """

    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: ParamStore,
    state: AdamState,
    grads: Mapping[str, np.ndarray] | None = None,
) -> None:
    """One Adam update over every trainable parameter in the store.

    Gradients come from ``Tensor.grad`` unless an explicit mapping is given.
    Parameters with ``requires_grad=False`` are skipped entirely (no decay),
    as are parameters whose gradient is absent.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        if grads is not None:
            g = grads.get(name)
        else:
            if not p.requires_grad:
                continue
            g = p.grad
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ValueError(
                f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name}"
            )
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        m_hat = m / bc1
        v_hat = v / bc2
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


class GradientCheckError(RuntimeError):
    """Raised when the loss turns non-finite during finite differencing."""


def gradient_check(
    loss_fn: Callable[[], Tensor],
    params: ParamStore,
    eps: float = 1e-5,
    max_coords: int = 200,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` must be a deterministic closure over ``params`` (re-seed any
    sampling inside it, disable dropout). For every parameter, a random
    subsample of at least ``max_coords`` coordinates is checked (all of them
    for smaller tensors). Returns the maximum relative error
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    if rng is None:
        rng = np.random.default_rng(0)

    params.zero_grad()
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise GradientCheckError("loss is non-finite at the sample point")
    loss.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
        if p.requires_grad
    }

    def eval_loss() -> float:
        with no_grad():
            return float(loss_fn().data)

    worst = 0.0
    for name, p in params.items():
        if not p.requires_grad:
            continue
        flat = p.data.reshape(-1)
        n = flat.size
        if n <= max_coords:
            idx = np.arange(n)
        else:
            idx = rng.choice(n, size=max_coords, replace=False)
        a_flat = analytic[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = eval_loss()
            flat[i] = orig - eps
            down = eval_loss()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise GradientCheckError(
                    f"non-finite loss while perturbing parameter {name!r}"
                )
            numeric = (up - down) / (2.0 * eps)
            a = a_flat[i]
            rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            if rel > worst:
                worst = rel
    return worst
