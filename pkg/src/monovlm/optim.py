"""AdamW with decoupled weight decay, plus warmup/constant/cosine LR schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


class OptimizerError(RuntimeError):
    """A trainable parameter is missing its gradient (or similar misuse)."""


@dataclass
class AdamWState:
    """Per-parameter moments and shared hyper-parameters of one optimizer."""

    lr: float
    beta1: float
    beta2: float
    eps: float
    weight_decay: float
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict.

    Update per step t (bias-corrected):
        p -= lr * wd * p
        m = b1*m + (1-b1)*g;  v = b2*v + (1-b2)*g^2
        p -= lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = dict(params)
        self.state = AdamWState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay)
        for name, p in self.params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        """Apply one AdamW update; ``lr`` overrides the stored rate (schedules)."""
        s = self.state
        rate = s.lr if lr is None else lr
        s.t += 1
        c1 = 1.0 - s.beta1**s.t
        c2 = 1.0 - s.beta2**s.t
        for name, p in self.params.items():
            if p.grad is None:
                raise OptimizerError(f"parameter {name!r} has no gradient")
            g = p.grad
            if s.weight_decay:
                p.data -= rate * s.weight_decay * p.data
            m = s.m[name]
            v = s.v[name]
            m *= s.beta1
            m += (1.0 - s.beta1) * g
            v *= s.beta2
            v += (1.0 - s.beta2) * (g * g)
            p.data -= rate * (m / c1) / (np.sqrt(v / c2) + s.eps)


def schedule_lr(step: int, *, peak: float, total_steps: int, warmup_steps: int = 0, kind: str = "constant") -> float:
    """Learning rate for 0-based ``step``: linear warmup then constant or cosine decay to zero."""
    if kind not in ("constant", "cosine"):
        raise ValueError(f"unknown schedule kind {kind!r}")
    if warmup_steps > total_steps:
        raise ValueError("warmup longer than the run")
    if warmup_steps > 0 and step < warmup_steps:
        return peak * (step + 1) / warmup_steps
    if kind == "constant":
        return peak
    span = max(total_steps - warmup_steps, 1)
    progress = (step - warmup_steps) / span
    return peak * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))
