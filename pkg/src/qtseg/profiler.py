"""Operation tallies collected while a forward pass runs.

Kernels call :func:`tally` with shape-derived counts; nothing is recorded
unless a :class:`OpCounter` is active.
"""
from __future__ import annotations

from collections import defaultdict

_ACTIVE: list["OpCounter"] = []


class OpCounter:
    """``macs`` counts multiply-accumulates (conv, transposed conv, linear,
    matmul); ``elementwise`` counts one op per output element of norms,
    activations, softmax and resize, and k*k compares per pooled element."""

    def __init__(self):
        self.macs = defaultdict(int)
        self.elementwise = defaultdict(int)

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    @property
    def total_macs(self) -> int:
        return sum(self.macs.values())

    @property
    def total_elementwise(self) -> int:
        return sum(self.elementwise.values())


def tally(op: str, macs: int = 0, elementwise: int = 0) -> None:
    for c in _ACTIVE:
        if macs:
            c.macs[op] += int(macs)
        if elementwise:
            c.elementwise[op] += int(elementwise)


def active() -> bool:
    return bool(_ACTIVE)
