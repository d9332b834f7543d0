"""Composite blocks: ConvBlock, C2F, SPPF, ConvTranspose block, attention, MLP."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import functional as F
from .module import BatchNorm2d, LayerNorm, Linear, Module, kaiming_uniform, parameter
from .tensor import ShapeError, Tensor, concat, matmul, mul, reshape, split, transpose


class ConfigError(ValueError):
    pass


class ConvBlock(Module):
    """SiLU(BN(Conv(x))) with same padding."""

    def __init__(self, c_in: int, c_out: int, k: int, s: int, rng: np.random.Generator):
        self.c_in, self.c_out, self.k, self.s = c_in, c_out, k, s
        fan_in = c_in * k * k
        self.weight = parameter(kaiming_uniform(rng, (c_out, c_in, k, k), fan_in))
        self.bias = parameter(np.zeros(c_out))
        self.bn = BatchNorm2d(c_out)

    def forward(self, x: Tensor) -> Tensor:
        y = F.conv2d(x, self.weight, self.bias, self.s, "same")
        return F.silu(self.bn(y))


class Bottleneck(Module):
    def __init__(self, c: int, rng: np.random.Generator):
        self.cv1 = ConvBlock(c, c, 3, 1, rng)
        self.cv2 = ConvBlock(c, c, 3, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.cv2(self.cv1(x))


class C2F(Module):
    """Split-transform-append block; spatial size is preserved.

    The entry 1x1 ConvBlock yields two halves of ``c_out // 2`` channels, each
    bottleneck consumes the newest chunk and appends its output, and the
    ``2 + b`` chunks are merged by the exit 1x1 ConvBlock.
    """

    def __init__(self, c_in: int, c_out: int, b: int, rng: np.random.Generator):
        if c_out % 2:
            raise ConfigError(f"C2F needs an even channel count, got {c_out}")
        if b < 1:
            raise ConfigError("C2F needs at least one bottleneck")
        self.c_in, self.c_out, self.b = c_in, c_out, b
        self.c_mid = c_out // 2
        self.cv1 = ConvBlock(c_in, 2 * self.c_mid, 1, 1, rng)
        self.m = [Bottleneck(self.c_mid, rng) for _ in range(b)]
        self.cv2 = ConvBlock((2 + b) * self.c_mid, c_out, 1, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.c_in:
            raise ShapeError(f"C2F expects {self.c_in} input channels, got {x.shape[1]}")
        chunks = split(self.cv1(x), [self.c_mid, self.c_mid], axis=1)
        for block in self.m:
            chunks.append(block(chunks[-1]))
        return self.cv2(concat(chunks, axis=1))


class SPPF(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, k: int = 5):
        c_hidden = c_in // 2
        self.k = k
        self.cv1 = ConvBlock(c_in, c_hidden, 1, 1, rng)
        self.cv2 = ConvBlock(4 * c_hidden, c_out, 1, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        y = [self.cv1(x)]
        for _ in range(3):
            y.append(F.maxpool2d(y[-1], self.k, 1))
        return self.cv2(concat(y, axis=1))


def channels_last_layer_norm(x: Tensor, norm: LayerNorm) -> Tensor:
    """LayerNorm over the channel axis at every spatial position of ``[B,C,H,W]``."""
    y = norm(transpose(x, (0, 2, 3, 1)))
    return transpose(y, (0, 3, 1, 2))


class ConvTransposeBlock(Module):
    """GELU(LN(ConvTranspose(x))) with kernel == stride."""

    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, s: int | None = None):
        s = k if s is None else s
        if k != s:
            raise ConfigError(f"ConvTranspose block needs kernel == stride, got k={k}, s={s}")
        self.c_in, self.c_out, self.k = c_in, c_out, k
        # torch fans in over weight.size(1) * k * k for transposed convs
        self.weight = parameter(kaiming_uniform(rng, (c_in, c_out, k, k), c_out * k * k))
        self.bias = parameter(np.zeros(c_out))
        self.norm = LayerNorm(c_out)

    def forward(self, x: Tensor) -> Tensor:
        y = F.conv_transpose2d(x, self.weight, self.bias, self.k)
        return F.gelu(channels_last_layer_norm(y, self.norm))


class Attention(Module):
    """Multi-head attention with an optional internal down-projection.

    Inputs are ``[B, T, D]`` or unbatched ``[T, D]``.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, downsample_rate: int = 1):
        internal = dim // downsample_rate
        if internal % heads:
            raise ConfigError(f"attention dim {internal} not divisible by {heads} heads")
        self.dim, self.heads, self.internal = dim, heads, internal
        self.q_proj = Linear(dim, internal, rng)
        self.k_proj = Linear(dim, internal, rng)
        self.v_proj = Linear(dim, internal, rng)
        self.out_proj = Linear(internal, dim, rng)

    def _split_heads(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        return transpose(reshape(x, (b, t, self.heads, self.internal // self.heads)), (0, 2, 1, 3))

    def forward(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        squeeze = q.ndim == 2
        if squeeze:
            q, k, v = (reshape(t, (1,) + t.shape) for t in (q, k, v))
        for t in (q, k, v):
            if t.shape[-1] != self.dim:
                raise ShapeError(f"attention expects model dim {self.dim}, got {t.shape[-1]}")
        if k.shape[1] != v.shape[1]:
            raise ShapeError("key and value token counts differ")
        b, tq, _ = q.shape
        qh = self._split_heads(self.q_proj(q))
        kh = self._split_heads(self.k_proj(k))
        vh = self._split_heads(self.v_proj(v))
        scale = 1.0 / math.sqrt(self.internal // self.heads)
        attn = F.softmax(mul(matmul(qh, transpose(kh, (0, 1, 3, 2))), scale), axis=-1)
        out = transpose(matmul(attn, vh), (0, 2, 1, 3))
        out = self.out_proj(reshape(out, (b, tq, self.internal)))
        return reshape(out, out.shape[1:]) if squeeze else out


class MLP(Module):
    """Linear layers with an activation between them (none after the last)."""

    def __init__(self, dims: Sequence[int], rng: np.random.Generator, act: str = "relu"):
        if len(dims) < 2:
            raise ConfigError("MLP needs at least input and output dims")
        self.dims = list(dims)
        self.act = act
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.dims[0]:
            raise ShapeError(f"MLP expects input dim {self.dims[0]}, got {x.shape[-1]}")
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.activation(x, self.act)
        return x


def mlp_dims(d_in: int, hidden: int, d_out: int, num_layers: int) -> list[int]:
    return [d_in] + [hidden] * (num_layers - 1) + [d_out]
