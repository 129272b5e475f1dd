"""AdamW with decoupled weight decay and a warmup + cosine learning-rate
schedule (linear warmup over the first 3% of steps, cosine decay to zero)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class WarmupCosine:
    """lr(t) for 1-based step t: linear ramp to base_lr over the warmup
    steps, then cosine decay to 0 at total_steps."""

    base_lr: float
    total_steps: int
    warmup_frac: float = 0.03

    def __post_init__(self):
        self.warmup_steps = max(1, int(math.ceil(self.warmup_frac * self.total_steps)))

    def lr(self, t: int) -> float:
        if t <= self.warmup_steps:
            return self.base_lr * t / self.warmup_steps
        if self.total_steps <= self.warmup_steps:
            return self.base_lr
        progress = (t - self.warmup_steps) / (self.total_steps - self.warmup_steps)
        return 0.5 * self.base_lr * (1.0 + math.cos(math.pi * min(progress, 1.0)))


class AdamW:
    """Decoupled-weight-decay Adam with bias correction.

    m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
    p <- p - lr_t * [ mhat / (sqrt(vhat) + eps) ]   then   p <- p (1 - lr_t wd)

    schedule=None keeps the learning rate constant.
    """

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0, schedule: WarmupCosine = None):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.schedule = schedule
        self.step_count = 0
        self.m = {p.name: np.zeros_like(p.value) for p in self.params}
        self.v = {p.name: np.zeros_like(p.value) for p in self.params}

    def current_lr(self) -> float:
        t = self.step_count
        return self.schedule.lr(t) if self.schedule is not None else self.lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> float:
        """One update from the accumulated gradients; returns the lr used."""
        self.step_count += 1
        lr_t = self.current_lr()
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for p in self.params:
            g = p.grad
            m = self.m[p.name]
            v = self.v[p.name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if lr_t == 0.0:
                continue  # moments advance, parameters stay bitwise put
            mhat = m / bc1
            vhat = v / bc2
            p.value -= lr_t * (mhat / (np.sqrt(vhat) + self.eps))
            if self.weight_decay != 0.0:
                p.value *= 1.0 - lr_t * self.weight_decay
        return lr_t


def grad_norm(params) -> float:
    """Global L2 norm over all parameter gradients."""
    total = 0.0
    for p in params:
        total += float(np.sum(p.grad * p.grad))
    return math.sqrt(total)
