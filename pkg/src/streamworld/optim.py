"""Optimizers: adaptive-moment (Adam with decoupled decay) and plain SGD.

Parameters are mutated in place between passes; moment buffers live in the
OptimState keyed by parameter name so they serialize with checkpoints.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import NumericsError, Tensor


@dataclass
class OptimState:
    kind: str = "adam"  # "adam" | "sgd"
    lr: float = 1e-4
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def opt_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptimState) -> None:
    """One in-place update. Deterministic given (params, grads, state)."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericsError(f"non-finite gradient for '{name}'")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {params[name].shape} for '{name}'")
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if state.weight_decay:
            p.data -= state.lr * state.weight_decay * p.data
        if state.kind == "sgd":
            p.data -= state.lr * g
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m += (1.0 - state.beta1) * (g - m)
        v += (1.0 - state.beta2) * (g * g - v)
        mhat = m / (1.0 - state.beta1 ** t)
        vhat = v / (1.0 - state.beta2 ** t)
        p.data -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype)
