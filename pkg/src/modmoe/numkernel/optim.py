"""AdamW with decoupled weight decay and a warmup-then-cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .module import ParamSet

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class Schedule:
    base_lr: float
    total_steps: int
    warmup_steps: int = 0
    min_lr: float = 0.0

    def lr(self, t: int) -> float:
        """Rate for the update that takes the counter from ``t`` to ``t + 1``.

        Linear warmup reaches ``base_lr`` at ``t == warmup_steps``; cosine decay
        then reaches ``min_lr`` at ``t == total_steps`` and stays there.
        """
        if t < self.warmup_steps:
            return self.base_lr * (t + 1) / self.warmup_steps
        span = self.total_steps - self.warmup_steps
        if span <= 0 or t >= self.total_steps:
            return self.min_lr if t >= self.total_steps else self.base_lr
        progress = (t - self.warmup_steps) / span
        return self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimState:
    schedule: Schedule
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(params: ParamSet, state: OptimState,
                   grads: dict[str, np.ndarray] | None = None) -> float:
    """One AdamW update of every trainable parameter, in place. Returns the lr used.

    ``grads`` defaults to each parameter's ``.grad``. Frozen parameters are
    skipped entirely and never get moment buffers.
    """
    lr = state.schedule.lr(state.step)
    t = state.step + 1
    bc1 = 1.0 - BETA1 ** t
    bc2 = 1.0 - BETA2 ** t
    for name in params.trainable():
        p = params[name]
        g = grads[name] if grads is not None and name in grads else p.grad
        if g is None:
            raise KeyError(f"missing gradient for trainable parameter {name!r}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * (g * g)
        if state.weight_decay:
            p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * ((m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS))
    state.step = t
    return lr
