"""YOLOv8-style FPN encoder producing the stride 8/16/32 pyramid."""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import functional as F
from .blocks import C2F, SPPF, ConfigError, ConvBlock
from .module import Module
from .tensor import ShapeError, Tensor, concat


class PyramidFeatures(NamedTuple):
    s0: Tensor  # [B, 4n, H/8,  W/8]
    s1: Tensor  # [B, 8n, H/16, W/16]
    s2: Tensor  # [B, 16n, H/32, W/32]


def _concat_aligned(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"neck concat spatial mismatch: {a.shape} vs {b.shape}")
    return concat([a, b], axis=1)


class FPNEncoder(Module):
    """Layers 0-21 of the encoder table; widths are n * {1, 2, 4, 8, 16}."""

    def __init__(self, n: int, rng: np.random.Generator, in_channels: int = 3):
        if n < 4 or n % 4:
            raise ConfigError(f"n must be a positive multiple of 4, got {n}")
        self.n = n
        self.in_channels = in_channels
        self.conv0 = ConvBlock(in_channels, n, 3, 2, rng)
        self.conv1 = ConvBlock(n, 2 * n, 3, 2, rng)
        self.c2f2 = C2F(2 * n, 2 * n, 1, rng)
        self.conv3 = ConvBlock(2 * n, 4 * n, 3, 2, rng)
        self.c2f4 = C2F(4 * n, 4 * n, 2, rng)
        self.conv5 = ConvBlock(4 * n, 8 * n, 3, 2, rng)
        self.c2f6 = C2F(8 * n, 8 * n, 2, rng)
        self.conv7 = ConvBlock(8 * n, 16 * n, 3, 2, rng)
        self.c2f8 = C2F(16 * n, 16 * n, 1, rng)
        self.sppf9 = SPPF(16 * n, 16 * n, rng)
        self.c2f12 = C2F(24 * n, 8 * n, 1, rng)
        self.c2f15 = C2F(12 * n, 4 * n, 1, rng)
        self.conv16 = ConvBlock(4 * n, 4 * n, 3, 2, rng)
        self.c2f18 = C2F(12 * n, 8 * n, 1, rng)
        self.conv19 = ConvBlock(8 * n, 8 * n, 3, 2, rng)
        self.c2f21 = C2F(24 * n, 16 * n, 1, rng)

    def forward(self, image: Tensor) -> PyramidFeatures:
        if image.ndim != 4:
            raise ShapeError(f"encoder expects [B,C,H,W], got {image.shape}")
        h, w = image.shape[2:]
        if h % 32 or w % 32:
            raise ValueError(f"input size {h}x{w} must be divisible by 32")
        if image.shape[1] != self.in_channels:
            raise ShapeError(f"encoder expects {self.in_channels} channels, got {image.shape[1]}")
        x = self.c2f2(self.conv1(self.conv0(image)))
        p4 = self.c2f4(self.conv3(x))
        p6 = self.c2f6(self.conv5(p4))
        p9 = self.sppf9(self.c2f8(self.conv7(p6)))
        p12 = self.c2f12(_concat_aligned(F.resize(p9, 2, "nearest"), p6))
        s0 = self.c2f15(_concat_aligned(F.resize(p12, 2, "nearest"), p4))
        s1 = self.c2f18(_concat_aligned(self.conv16(s0), p12))
        s2 = self.c2f21(_concat_aligned(self.conv19(s1), p9))
        return PyramidFeatures(s0, s1, s2)


def build_encoder(config, rng_seed: int | None = None) -> FPNEncoder:
    seed = config.seed if rng_seed is None else rng_seed
    return FPNEncoder(config.n, np.random.default_rng(seed), config.in_channels)
