"""AdamW with decoupled weight decay, and the step-decay learning-rate schedule."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor


class AdamW:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-4):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise RuntimeError(f"parameter {i} {p.shape} has no gradient; run backward first")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            p.data *= 1.0 - lr * self.weight_decay
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            denom = np.sqrt(v / c2) + self.eps
            p.data -= (lr / c1) * m / denom

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"step": np.array([self.step_count], dtype=np.float32)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m.{i}"] = m
            out[f"v.{i}"] = v
        return out


def adamw_step(params, state: AdamW, lr: float | None = None) -> None:
    state.step(lr)


def lr_at(epoch: int, base: float = 1e-3, factor: float = 0.1, every: int = 50, floor: float = 1e-5) -> float:
    """Step decay: ``base * factor**(epoch // every)``, never below ``floor``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return max(base * factor ** (epoch // every), floor)
