"""Adam over a flat parameter vector, with constant or cosine learning rate."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class CosineSchedule:
    total_steps: int
    min_fraction: float = 0.05

    def __call__(self, step: int) -> float:
        if self.total_steps <= 1:
            return 1.0
        t = min(step, self.total_steps - 1) / (self.total_steps - 1)
        return self.min_fraction + (1.0 - self.min_fraction) * 0.5 * (1.0 + math.cos(math.pi * t))


def constant_schedule(step: int) -> float:
    return 1.0


@dataclass
class OptimState:
    """Adam moments for a flat vector.

    ``lr`` may be a scalar or a per-entry array (parameter groups flattened
    alongside the parameters).  ``schedule(step)`` scales it.
    """

    size: int
    lr: float | np.ndarray = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: object = constant_schedule
    step: int = 0
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)

    def __post_init__(self):
        self.m = np.zeros(self.size)
        self.v = np.zeros(self.size)

    def current_lr(self):
        return self.lr * self.schedule(self.step)

    def update(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """Return the stepped parameters; ``params`` is not modified."""
        if params.shape != (self.size,) or grad.shape != (self.size,):
            raise ValueError("parameter/gradient size does not match optimizer state")
        lr = self.current_lr()
        self.step += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.step)
        v_hat = self.v / (1.0 - self.beta2 ** self.step)
        return params - lr * m_hat / (np.sqrt(v_hat) + self.eps)
