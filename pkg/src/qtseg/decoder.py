"""Multi-query mask decoder.

Three query-mask decoders run from the coarsest pyramid stage to the finest.
Between stages the image features go through a ConvTranspose block and are
merged with the next stage's fused features; the query tokens go through an
MLP that maps them to the next stage's width. The final tokens, after a
hypernetwork MLP, act as per-class weights in a dot product with the
upsampled features.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import functional as F
from .blocks import MLP, Attention, ConfigError, ConvBlock, ConvTransposeBlock, mlp_dims
from .encoder import PyramidFeatures
from .module import LayerNorm, Module, parameter
from .tensor import ShapeError, Tensor, concat, matmul, reshape, transpose


@lru_cache(maxsize=32)
def _sinusoidal(h: int, w: int, dim: int) -> np.ndarray:
    if dim % 4:
        raise ConfigError(f"positional embedding dim must be divisible by 4, got {dim}")
    m = dim // 4
    freqs = np.array([1.0]) if m == 1 else 10000.0 ** (-np.arange(m) / (m - 1))
    out = np.empty((dim, h, w), dtype=np.float64)
    rows = np.arange(h, dtype=np.float64)[:, None] * freqs  # [h, m]
    cols = np.arange(w, dtype=np.float64)[:, None] * freqs  # [w, m]
    half = dim // 2
    out[0:half:2] = np.sin(rows).T[:, :, None]
    out[1:half:2] = np.cos(rows).T[:, :, None]
    out[half::2] = np.sin(cols).T[:, None, :]
    out[half + 1::2] = np.cos(cols).T[:, None, :]
    out.setflags(write=False)
    return out


def positional_embedding(h: int, w: int, dim: int, dtype=np.float32) -> np.ndarray:
    """``[dim, h, w]`` fixed 2-D sinusoidal encoding.

    The first half of the channels encodes the row index and the second half
    the column index, as interleaved sin/cos pairs with frequencies spaced
    geometrically from 1 down to 1/10000.
    """
    return _sinusoidal(h, w, dim).astype(dtype)


def img2seq(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    return transpose(reshape(x, (b, c, h * w)), (0, 2, 1))


def seq2img(x: Tensor, h: int, w: int) -> Tensor:
    b, t, c = x.shape
    return reshape(transpose(x, (0, 2, 1)), (b, c, h, w))


class TwoWayBlock(Module):
    """One iteration of the decoder loop: token self-attention, token-to-image
    cross-attention, MLP, then image-to-token cross-attention."""

    def __init__(self, dim, heads, mlp_hidden, rng, downsample: int = 1):
        self.self_attn = Attention(dim, heads, rng)
        self.norm1 = LayerNorm(dim)
        self.cross_t2i = Attention(dim, heads, rng, downsample)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP([dim, mlp_hidden, dim], rng, act="gelu")
        self.norm3 = LayerNorm(dim)
        self.cross_i2t = Attention(dim, heads, rng, downsample)
        self.norm4 = LayerNorm(dim)

    def forward(self, query: Tensor, key: Tensor, value: Tensor, first: bool):
        if first:
            q = self.norm1(self.self_attn(query, query, query))
            query = q + query
        else:
            query = self.norm1(self.self_attn(query, query, query))
        attn_out = self.cross_t2i(query, key, value)
        query = self.norm2(query + attn_out)
        query = self.norm3(self.mlp(query) + query)
        attn_out = self.cross_i2t(key, query, query)
        key = self.norm4(key + attn_out)
        return query, key


class QMDecoder(Module):
    """Query-mask decoder for one pyramid stage, run for ``h`` blocks."""

    def __init__(self, dim, heads, h, mlp_hidden, rng, downsample: int = 1):
        if h < 1:
            raise ConfigError("number of hidden blocks must be >= 1")
        self.dim, self.h = dim, h
        self.blocks = [TwoWayBlock(dim, heads, mlp_hidden, rng, downsample) for _ in range(h)]
        self.final_attn = Attention(dim, heads, rng, downsample)
        self.norm_final = LayerNorm(dim)

    def forward(self, tokens: Tensor, feats: Tensor, pe: np.ndarray) -> tuple[Tensor, Tensor]:
        """tokens ``[B, N, F]``, feats ``[B, F, H, W]``, pe ``[F, H, W]``."""
        b, c, h, w = feats.shape
        if c != self.dim or tokens.shape[-1] != self.dim:
            raise ShapeError(f"QM decoder of dim {self.dim} got tokens {tokens.shape}, features {feats.shape}")
        if pe.shape != (c, h, w):
            raise ShapeError(f"positional embedding {pe.shape} does not match features {feats.shape}")
        query = tokens
        key = img2seq(feats + Tensor(pe, dtype=feats.dtype))
        value = img2seq(feats)
        for t, block in enumerate(self.blocks):
            query, key = block(query, key, value, first=(t == 0))
        q = query + tokens
        attn_out = self.final_attn(q, key, value)
        tokens_out = self.norm_final(query + attn_out)
        return tokens_out, seq2img(key, h, w)


def qm_decode(q: Tensor, s: Tensor, fe: np.ndarray, p: QMDecoder) -> tuple[Tensor, Tensor]:
    return p(q, s, fe)


def predict_mask(features: Tensor, tokens: Tensor, hypernet: Module | None, out_size: tuple[int, int]) -> Tensor:
    """Per-class logits: dot product of hypernet(tokens) with every feature pixel,
    then bilinear rescale to ``out_size``. features ``[B,C,h,w]``, tokens ``[B,N,C]``."""
    b, c, h, w = features.shape
    weights = hypernet(tokens) if hypernet is not None else tokens
    if weights.shape[-1] != c:
        raise ShapeError(f"mask head: token dim {weights.shape[-1]} != feature channels {c}")
    logits = matmul(weights, reshape(features, (b, c, h * w)))
    logits = reshape(logits, (b, weights.shape[1], h, w))
    return F.resize(logits, mode="bilinear", size=out_size)


class MQMDecoder(Module):
    def __init__(self, config, rng: np.random.Generator):
        n = config.n
        f0, f1, f2 = config.stage_dims
        hb2, hb1, hb0 = config.h_blocks
        ds = config.attn_downsample
        self.n = n
        self.num_classes = config.num_classes
        self.aggregation = config.aggregation
        # stored as [F_2, N]; one column per class
        self.query_tokens = parameter(rng.normal(0.0, 0.02, size=(f2, config.num_classes)))
        self.qm2 = QMDecoder(f2, config.heads, hb2, config.mlp_hidden, rng, ds)
        self.qm1 = QMDecoder(f1, config.heads, hb1, config.mlp_hidden, rng, ds)
        self.qm0 = QMDecoder(f0, config.heads, hb0, config.mlp_hidden, rng, ds)
        self.up2 = ConvTransposeBlock(f2, f1, 2, rng)
        self.up1 = ConvTransposeBlock(f1, f0, 2, rng)
        self.up0_0 = ConvTransposeBlock(f0, 2 * n, 2, rng)
        self.up0_1 = ConvTransposeBlock(2 * n, f0, 2, rng)
        layers = config.mlp_layers
        self.mlp2 = MLP(mlp_dims(f2, config.mlp_hidden, f1, layers), rng, act="gelu")
        self.mlp1 = MLP(mlp_dims(f1, config.mlp_hidden, f0, layers), rng, act="gelu")
        self.hypernet = MLP(mlp_dims(f0, config.mlp_hidden, f0, layers), rng, act="gelu")
        if config.aggregation == "concat":
            self.proj1 = ConvBlock(2 * f1, f1, 1, 1, rng)
            self.proj0 = ConvBlock(2 * f0, f0, 1, 1, rng)

    def _aggregate(self, up: Tensor, skip: Tensor, proj) -> Tensor:
        if self.aggregation == "add":
            if up.shape != skip.shape:
                raise ShapeError(f"add aggregation needs equal shapes, got {up.shape} and {skip.shape}")
            return up + skip
        if up.shape[2:] != skip.shape[2:]:
            raise ShapeError(f"concat aggregation spatial mismatch: {up.shape} vs {skip.shape}")
        return proj(concat([up, skip], axis=1))

    def forward(self, sf: PyramidFeatures, debug: bool = False):
        """Returns (final_features ``[B, 4n, H/2, W/2]``, final_tokens ``[B, N, 4n]``).

        With ``debug=True`` a third item holds the stage-2 and stage-1
        intermediate (token, feature) pairs ready for the mask head.
        """
        s0, s1, s2 = sf
        b = s2.shape[0]
        dt = s2.dtype
        tokens = transpose(self.query_tokens, (1, 0))
        tokens = reshape(tokens, (1,) + tokens.shape)
        if b > 1:
            tokens = tokens + Tensor(np.zeros((b, 1, 1)), dtype=dt)
        pe = lambda s: positional_embedding(s.shape[2], s.shape[3], s.shape[1], dt)  # noqa: E731

        q2, f2 = self.qm2(tokens, s2, pe(s2))
        up = self.up2(f2)
        t1 = self.mlp2(q2)
        x1 = self._aggregate(up, s1, getattr(self, "proj1", None))
        q1, f1 = self.qm1(t1, x1, pe(x1))
        up1 = self.up1(f1)
        t0 = self.mlp1(q1)
        x0 = self._aggregate(up1, s0, getattr(self, "proj0", None))
        q0, f0 = self.qm0(t0, x0, pe(x0))
        feats = self.up0_1(self.up0_0(f0))
        if debug:
            return feats, q0, [(t1, up), (t0, up1)]
        return feats, q0


def decode_pyramid(sf: PyramidFeatures, p: MQMDecoder) -> tuple[Tensor, Tensor]:
    return p(sf)
