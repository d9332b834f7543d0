"""Central finite-difference check of tape gradients.

Run it under ``precision(np.float64)``: at step 1e-3 the rounding noise of a
float32 loss is of the same order as many gradient entries.

Max pooling makes the loss piecewise smooth. When ``x +- delta`` straddles
an argmax switch the central difference averages two different slopes and
is not a valid oracle for that coordinate. Such coordinates are detected by
comparing the two one-sided slopes and, with ``skip_kinks``, redrawn; they
are still reported in ``kinks``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import GradTape, Tensor, no_grad


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst: tuple[int, int] | None
    records: list[tuple[int, int, float, float, float]] = field(default_factory=list)
    kinks: list[tuple[int, int, float, float]] = field(default_factory=list)

    def passed(self, tol: float = 1e-2) -> bool:
        return self.max_rel_error < tol


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def gradcheck(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], n_coords: int = 50,
              delta: float = 1e-3, seed: int = 0, floor: float = 1e-6, skip_kinks: bool = False,
              kink_tol: float = 0.05, max_draws: int | None = None) -> GradCheckResult:
    """Compare analytic gradients of ``loss_fn()`` w.r.t. ``params`` with central differences.

    Coordinates are drawn by picking a tensor uniformly and then an element
    uniformly within it, so small tensors (biases, norms) get sampled too.
    A coordinate counts as a kink when its forward and backward one-sided
    slopes differ by more than ``kink_tol`` relative to their magnitude.
    """
    params = list(params)
    for p in params:
        p.grad = None
    with GradTape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    base = loss.item()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    max_draws = max_draws or 4 * n_coords
    records, kinks = [], []
    worst, worst_err = None, 0.0
    draws = 0
    while len(records) < n_coords and draws < max_draws:
        draws += 1
        ti = int(rng.integers(len(params)))
        p = params[ti]
        flat = p.data.reshape(-1)
        ei = int(rng.integers(flat.size))
        orig = flat[ei]
        with no_grad():
            flat[ei] = orig + delta
            up = loss_fn().item()
            flat[ei] = orig - delta
            down = loss_fn().item()
        flat[ei] = orig
        fwd, bwd = (up - base) / delta, (base - down) / delta
        if skip_kinks and relative_error(fwd, bwd, max(floor, 1e-4)) > kink_tol:
            kinks.append((ti, ei, fwd, bwd))
            continue
        numeric = (up - down) / (2 * delta)
        a = float(analytic[ti].reshape(-1)[ei])
        err = relative_error(a, numeric, floor)
        records.append((ti, ei, a, numeric, err))
        if err >= worst_err:
            worst, worst_err = (ti, ei), err
    if len(records) < n_coords:
        worst_err = float("inf")
    return GradCheckResult(worst_err, worst, records, kinks)
