"""Central finite-difference oracle for the autodiff engine."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .module import ParamSet

KINK_TOL = 1e-7
GRAD_FLOOR = 1e-8


class NonDeterministicError(RuntimeError):
    pass


@dataclass
class GradCheckResult:
    errors: dict[str, float] = field(default_factory=dict)
    skipped: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


@contextlib.contextmanager
def _watch_kinks():
    """Record every ReLU input produced while active."""
    prev = T.RELU_WATCH
    T.RELU_WATCH = log = []
    try:
        yield log
    finally:
        T.RELU_WATCH = prev


def _evaluate(fn):
    with T.no_grad(), _watch_kinks() as log:
        value = float(fn().data)
    return value, log


def _crosses_kink(center, plus, minus) -> bool:
    """Whether a ReLU input moved by this probe sits at or crosses zero."""
    for c, p, m in zip(center, plus, minus):
        moved = p != m
        if np.any(moved & (np.abs(c) < KINK_TOL)):
            return True
        if np.any(moved & (np.sign(p) != np.sign(m))):
            return True
    return False


def finite_difference_check(fn: Callable[[], T.Tensor], params: ParamSet,
                            eps: float = 1e-5, names: list[str] | None = None) -> GradCheckResult:
    """Compare autodiff gradients of scalar ``fn()`` with central differences.

    Per parameter the error is max |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8).
    Coordinates whose perturbation crosses or sits within 1e-7 of a ReLU kink
    are skipped and counted in ``skipped``.
    """
    names = params.trainable() if names is None else names
    base, center = _evaluate(fn)
    again, _ = _evaluate(fn)
    if base != again:
        raise NonDeterministicError(f"function returned {base!r} then {again!r} at the same point")

    params.zero_grad()
    out = fn()
    if out.size != 1:
        raise ValueError("finite_difference_check needs a scalar function")
    out.backward()

    result = GradCheckResult()
    for name in names:
        p = params[name]
        g_ad = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        worst = 0.0
        skipped = 0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp, plus = _evaluate(fn)
            flat[i] = orig - eps
            fm, minus = _evaluate(fn)
            flat[i] = orig
            if center and _crosses_kink(center, plus, minus):
                skipped += 1
                continue
            g_fd = (fp - fm) / (2.0 * eps)
            ga = g_ad.reshape(-1)[i]
            err = abs(ga - g_fd) / max(abs(ga), abs(g_fd), GRAD_FLOOR)
            worst = max(worst, err)
        result.errors[name] = worst
        result.skipped[name] = skipped
    return result
