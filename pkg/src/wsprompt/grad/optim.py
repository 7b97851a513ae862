"""Adam with decoupled weight decay and linear warmup."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import GradError, Tensor


class NonFiniteGradient(GradError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"adam_step: non-finite gradient for parameter {name!r}")


@dataclass
class OptimizerState:
    lr: float
    total_steps: int
    weight_decay: float = 0.0
    warmup_fraction: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {self.lr}")
        if self.weight_decay < 0:
            raise ValueError(f"weight decay must be non-negative, got {self.weight_decay}")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ValueError(f"warmup fraction must lie in [0, 1], got {self.warmup_fraction}")
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")

    def current_lr(self, step: int | None = None) -> float:
        """Rate used at 1-based ``step``: linear ramp over the warmup steps, then flat."""
        t = self.step + 1 if step is None else step
        warm = math.ceil(self.warmup_fraction * self.total_steps)
        if warm > 0 and t <= warm:
            return self.lr * t / warm
        return self.lr


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState) -> None:
    """Apply one update in place to every parameter that has a gradient."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
    lr = state.current_lr()
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"adam_step: gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        upd = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay:
            upd = upd + state.weight_decay * p.data
        p.data = (p.data - lr * upd).astype(p.dtype)


def step_params(params: dict[str, Tensor], state: OptimizerState) -> None:
    """Adam step reading ``.grad`` off each parameter, then clearing it."""
    grads = {k: p.grad for k, p in params.items() if p.grad is not None}
    adam_step(params, grads, state)
    for p in params.values():
        p.grad = None
