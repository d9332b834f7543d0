"""Multi-level feature fusion: every output stage mixes all three inputs.

The current stage keeps half of its channel budget and each other stage
contributes a quarter; downward paths use strided ConvBlocks and upward paths
use ConvTranspose blocks.
"""
from __future__ import annotations

import numpy as np

from .blocks import ConvBlock, ConvTransposeBlock
from .encoder import PyramidFeatures
from .module import Module
from .tensor import ShapeError, concat


class MLFF(Module):
    def __init__(self, n: int, rng: np.random.Generator):
        c0, c1, c2 = 4 * n, 8 * n, 16 * n
        self.n = n
        self.s00 = ConvBlock(c0, 2 * n, 1, 1, rng)
        self.s01 = ConvTransposeBlock(c1, n, 2, rng)
        self.s02 = ConvTransposeBlock(c2, n, 4, rng)
        self.s10 = ConvBlock(c0, 2 * n, 3, 2, rng)
        self.s11 = ConvBlock(c1, 4 * n, 1, 1, rng)
        self.s12 = ConvTransposeBlock(c2, 2 * n, 2, rng)
        self.s20 = ConvBlock(c0, 4 * n, 3, 4, rng)
        self.s21 = ConvBlock(c1, 4 * n, 3, 2, rng)
        self.s22 = ConvBlock(c2, 8 * n, 1, 1, rng)

    @staticmethod
    def _fuse(parts, like):
        for p in parts:
            if p.shape[2:] != like.shape[2:]:
                raise ShapeError(f"MLFF branch {p.shape} misaligned with stage {like.shape}")
        out = concat(parts, axis=1)
        if out.shape != like.shape:
            raise ShapeError(f"MLFF produced {out.shape}, expected {like.shape}")
        return out

    def forward(self, s: PyramidFeatures) -> PyramidFeatures:
        s0, s1, s2 = s
        n = self.n
        if (s0.shape[1], s1.shape[1], s2.shape[1]) != (4 * n, 8 * n, 16 * n):
            raise ShapeError(f"pyramid channels {(s0.shape[1], s1.shape[1], s2.shape[1])} do not match n={n}")
        sf0 = self._fuse([self.s00(s0), self.s01(s1), self.s02(s2)], s0)
        sf1 = self._fuse([self.s10(s0), self.s11(s1), self.s12(s2)], s1)
        sf2 = self._fuse([self.s20(s0), self.s21(s1), self.s22(s2)], s2)
        return PyramidFeatures(sf0, sf1, sf2)


def fuse(s: PyramidFeatures, p: MLFF) -> PyramidFeatures:
    return p(s)


def maybe_fuse(s: PyramidFeatures, p: MLFF | None, enabled: bool) -> PyramidFeatures:
    if not enabled:
        return s
    return p(s)
