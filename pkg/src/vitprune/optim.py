"""Adam and AdamW parameter updates with learning-rate schedules."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor

__all__ = ["ConstantSchedule", "CosineWarmupSchedule", "Adam", "AdamW"]


class ConstantSchedule:
    def __init__(self, base_lr: float):
        self.base_lr = float(base_lr)

    def lr_at(self, step: int) -> float:
        return self.base_lr


class CosineWarmupSchedule:
    """Linear warmup from ``base_lr * warmup_start_factor`` up to ``base_lr``
    over ``warmup_steps``, then cosine annealing to ``min_lr`` at
    ``total_steps``. Steps are 1-based (the step counter of the optimizer)."""

    def __init__(self, base_lr: float, total_steps: int, warmup_steps: int = 0,
                 warmup_start_factor: float = 0.033, min_lr: float = 0.0):
        if total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not 0 <= warmup_steps <= total_steps:
            raise ValueError("warmup_steps must lie in [0, total_steps]")
        self.base_lr = float(base_lr)
        self.total_steps = int(total_steps)
        self.warmup_steps = int(warmup_steps)
        self.warmup_start_factor = float(warmup_start_factor)
        self.min_lr = float(min_lr)

    def lr_at(self, step: int) -> float:
        s = min(max(step - 1, 0), self.total_steps - 1)
        if s < self.warmup_steps:
            frac = s / self.warmup_steps
            factor = self.warmup_start_factor + (1.0 - self.warmup_start_factor) * frac
            return self.base_lr * factor
        span = max(self.total_steps - self.warmup_steps, 1)
        progress = (s - self.warmup_steps) / span
        cos = 0.5 * (1.0 + math.cos(math.pi * progress))
        return self.min_lr + (self.base_lr - self.min_lr) * cos


class Adam:
    """Adam with optional L2 weight decay folded into the gradient.

    ``params`` is an iterable of (name, Tensor) pairs; iteration order fixes
    the update order, so pass a deterministic sequence.
    """

    decoupled = False

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, schedule=None):
        self.params = [(name, p) for name, p in params]
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.schedule = schedule
        self.t = 0
        self._m = {name: np.zeros_like(p.data) for name, p in self.params}
        self._v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self) -> float:
        """Apply one update; returns the learning rate that was used."""
        self.t += 1
        lr = self.schedule.lr_at(self.t) if self.schedule is not None else self.lr
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params:
            if p.grad is None:
                raise ValueError(f"parameter {name} has no gradient; run backward first")
            g = p.grad
            if self.weight_decay and not self.decoupled:
                g = g + self.weight_decay * p.data
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if self.weight_decay and self.decoupled:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        return lr


class AdamW(Adam):
    """Adam with decoupled weight decay: w <- w - lr * decay * w before the
    moment-based update."""

    decoupled = True
