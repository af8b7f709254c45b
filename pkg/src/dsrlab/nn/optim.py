"""Optimizers and the learning-rate halving schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class SGD:
    """Plain SGD, with optional heavy-ball momentum (off by default)."""

    def __init__(self, lr: float, momentum: float = 0.0, clip: float | None = None):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.lr, self.momentum, self.clip = lr, momentum, clip
        self._velocity: dict[int, np.ndarray] = {}

    def step(self, params, grads) -> None:
        grads = clip_gradients(grads, self.clip)
        for i, (p, g) in enumerate(zip(params, grads)):
            if self.momentum:
                v = self._velocity.setdefault(i, np.zeros_like(p))
                v *= self.momentum
                v -= self.lr * g
                p += v
            else:
                p -= self.lr * g


class Adam:
    """Adam with bias-corrected moments."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 clip: float | None = None):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.lr, self.beta1, self.beta2, self.eps, self.clip = lr, beta1, beta2, eps, clip
        self.t = 0
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}

    def step(self, params, grads) -> None:
        grads = clip_gradients(grads, self.clip)
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for i, (p, g) in enumerate(zip(params, grads)):
            m = self._m.setdefault(i, np.zeros_like(p))
            v = self._v.setdefault(i, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_gradients(grads, max_norm: float | None):
    """Rescale all gradients jointly so their global L2 norm is at most ``max_norm``."""
    if max_norm is None:
        return grads
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total <= max_norm:
        return grads
    return [g * (max_norm / total) for g in grads]


def make_optimizer(kind: str, lr: float, **kwargs):
    kind = kind.lower()
    if kind == "sgd":
        return SGD(lr, **kwargs)
    if kind == "adam":
        return Adam(lr, **kwargs)
    raise ValueError(f"unknown optimizer {kind!r}")


@dataclass
class LrSchedule:
    """Halving ("newbob") schedule driven by dev frame-accuracy improvement.

    Improvements are absolute changes in accuracy (fractions, so 0.005 is
    half a percentage point). While the improvement stays at or above
    ``start_threshold`` the rate is kept. The first epoch below it starts
    halving, after which the rate halves every epoch until an improvement
    falls below ``stop_threshold`` and training stops.
    """

    lr: float
    start_threshold: float = 0.005
    stop_threshold: float = 0.001
    halving: bool = False
    stopped: bool = False
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.start_threshold <= 0 or self.stop_threshold <= 0:
            raise ValueError("thresholds must be positive")

    def update(self, improvement: float) -> float:
        if self.stopped:
            return self.lr
        if self.halving:
            if improvement < self.stop_threshold:
                self.stopped = True
            else:
                self.lr /= 2.0
        elif improvement < self.start_threshold:
            self.halving = True
            self.lr /= 2.0
        self.history.append(self.lr)
        return self.lr
