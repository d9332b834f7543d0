"""Differentiable kernels: convolution, pooling, resize, norms, activations.

Spatial ops take ``[B, C, H, W]`` (or an unbatched ``[C, H, W]``, which is
treated as B=1 and returned unbatched).
"""
from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
from scipy.special import erf

from . import kernels, profiler
from .tensor import ShapeError, Tensor, record, reshape

_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _batched(x: Tensor):
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"expected [C,H,W] or [B,C,H,W], got {x.shape}")
    return x, False


def _unbatch(y: Tensor, squeeze: bool) -> Tensor:
    if squeeze:
        return reshape(y, y.shape[1:])
    return y


def same_padding(size: int, k: int, s: int) -> tuple[int, int, int]:
    """(out, pad_before, pad_after) for 'same' padding; extra pixel goes after."""
    out = -(-size // s)
    total = max((out - 1) * s + k - size, 0)
    return out, total // 2, total - total // 2


def conv_output_size(size: int, k: int, s: int, padding: str) -> int:
    if padding == "same":
        return same_padding(size, k, s)[0]
    if padding == "valid":
        return (size - k) // s + 1
    raise ValueError(f"unknown padding '{padding}'")


# ---------------------------------------------------------------------------
# convolution

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: str = "same") -> Tensor:
    """Cross-correlation via im2col + GEMM. weight is ``[C_out, C_in, K, K]``."""
    x, squeeze = _batched(x)
    b, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if k != k2:
        raise ShapeError("only square kernels are supported")
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    if k < 1 or stride < 1:
        raise ValueError("kernel size and stride must be >= 1")
    if padding == "same":
        ho, pt, pb = same_padding(h, k, stride)
        wo, pl, pr = same_padding(w, k, stride)
    elif padding == "valid":
        ho, wo = conv_output_size(h, k, stride, "valid"), conv_output_size(w, k, stride, "valid")
        pt = pb = pl = pr = 0
        if ho < 1 or wo < 1:
            raise ShapeError(f"valid conv of {h}x{w} with k={k} is empty")
    else:
        raise ValueError(f"unknown padding '{padding}'")

    xd = x.data
    wmat = weight.data.reshape(cout, cin * k * k)
    fast = k == 1 and stride == 1
    if fast:
        cols = xd.reshape(b, cin, h * w)
        hp, wp = h, w
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else xd
        hp, wp = xp.shape[2:]
        cols = kernels.im2col(np.ascontiguousarray(xp), k, stride, ho, wo)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1)
    out = out.reshape(b, cout, ho, wo)
    if profiler.active():
        profiler.tally("conv2d", macs=k * k * cin * out.size)

    def bw(g):
        g2 = g.reshape(b, cout, ho * wo)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        gcols = np.matmul(wmat.T, g2)
        if fast:
            gx = gcols.reshape(b, cin, h, w)
        else:
            gx = kernels.col2im(np.ascontiguousarray(gcols), hp, wp, k, stride, ho, wo)
            gx = np.ascontiguousarray(gx[:, :, pt:pt + h, pl:pl + w])
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    y = record("conv2d", out, inputs, bw)
    return _unbatch(y, squeeze)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2) -> Tensor:
    """Transposed convolution with kernel size equal to stride (non-overlapping tiles).

    weight is ``[C_in, C_out, K, K]``; output is ``[B, C_out, H*K, W*K]``.
    """
    x, squeeze = _batched(x)
    b, cin, h, w = x.shape
    wcin, cout, k, k2 = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv_transpose2d: input has {cin} channels, weight expects {wcin}")
    if k != k2 or k != stride:
        raise ShapeError(f"conv_transpose2d requires kernel == stride, got k={k}, s={stride}")
    wmat = weight.data.reshape(cin, cout * k * k)
    xs = x.data.reshape(b, cin, h * w)
    # [B, Cout*k*k, HW] -> [B, Cout, H, k, W, k]
    tiles = np.matmul(wmat.T, xs)
    out = tiles.reshape(b, cout, k, k, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(b, cout, h * k, w * k)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out)
    if profiler.active():
        profiler.tally("conv_transpose2d", macs=cin * out.size)

    def bw(g):
        gt = g.reshape(b, cout, h, k, w, k).transpose(0, 1, 3, 5, 2, 4).reshape(b, cout * k * k, h * w)
        gx = np.matmul(wmat, gt).reshape(x.shape)
        gw = np.tensordot(xs, gt, axes=([0, 2], [0, 2])).reshape(weight.shape)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _unbatch(record("conv_transpose2d", out, inputs, bw), squeeze)


def maxpool2d(x: Tensor, k: int, stride: int | None = None, same_padding_: bool = True) -> Tensor:
    x, squeeze = _batched(x)
    s = stride or k
    if k < 1 or s < 1:
        raise ValueError("pool size and stride must be >= 1")
    b, c, h, w = x.shape
    if same_padding_:
        ho, pt, pb = same_padding(h, k, s)
        wo, pl, pr = same_padding(w, k, s)
    else:
        ho, wo = (h - k) // s + 1, (w - k) // s + 1
        pt = pb = pl = pr = 0
    xd = x.data
    if pt or pb or pl or pr:
        xd = np.pad(xd, ((0, 0), (0, 0), (pt, pb), (pl, pr)), constant_values=-np.inf)
    hp, wp = xd.shape[2:]
    out, idx = kernels.maxpool_forward(np.ascontiguousarray(xd), k, s, ho, wo)
    if profiler.active():
        profiler.tally("maxpool2d", elementwise=k * k * out.size)

    def bw(g):
        gx = kernels.maxpool_backward(np.ascontiguousarray(g), idx, hp, wp, k, s)
        return (np.ascontiguousarray(gx[:, :, pt:pt + h, pl:pl + w]),)

    return _unbatch(record("maxpool2d", out, (x,), bw), squeeze)


# ---------------------------------------------------------------------------
# resize

def interp_matrix(n_in: int, n_out: int, mode: str, dtype=np.float32) -> np.ndarray:
    """``[n_out, n_in]`` linear map realising 1-D resampling.

    bilinear follows the half-pixel (align_corners=False) convention with
    edge clamping; nearest picks ``floor(o * n_in / n_out)``.
    """
    m = np.zeros((n_out, n_in), dtype=np.float64)
    o = np.arange(n_out)
    if mode == "nearest":
        src = np.minimum((o * n_in) // n_out, n_in - 1)
        m[o, src] = 1.0
    elif mode == "bilinear":
        scale = n_in / n_out
        src = np.maximum((o + 0.5) * scale - 0.5, 0.0)
        i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
        i1 = np.minimum(i0 + 1, n_in - 1)
        lam = src - i0
        np.add.at(m, (o, i0), 1.0 - lam)
        np.add.at(m, (o, i1), lam)
    else:
        raise ValueError(f"unknown resize mode '{mode}'")
    return m.astype(dtype)


def resize(x: Tensor, factor=2, mode: str = "nearest", size: tuple[int, int] | None = None) -> Tensor:
    """Rescale the two trailing spatial axes by a rational factor (or to ``size``)."""
    h, w = x.shape[-2:]
    if size is None:
        f = Fraction(factor)
        if f <= 0:
            raise ValueError("resize factor must be positive")
        hh, ww = h * f, w * f
        if hh.denominator != 1 or ww.denominator != 1:
            raise ValueError(f"resize factor {factor} gives non-integral size from {h}x{w}")
        size = (int(hh), int(ww))
    ho, wo = size
    if (ho, wo) == (h, w):
        return x
    if mode == "nearest" and ho % h == 0 and wo % w == 0:
        fh, fw = ho // h, wo // w
        out = np.repeat(np.repeat(x.data, fh, axis=-2), fw, axis=-1)
        if profiler.active():
            profiler.tally("resize", elementwise=out.size)
        lead = x.shape[:-2]

        def bw_rep(g):
            return (g.reshape(lead + (h, fh, w, fw)).sum(axis=(-3, -1)),)

        return record("resize", out, (x,), bw_rep)
    ah = interp_matrix(h, ho, mode, x.dtype)
    aw = interp_matrix(w, wo, mode, x.dtype)
    out = np.matmul(np.matmul(ah, x.data), aw.T)
    if profiler.active():
        profiler.tally("resize", elementwise=out.size)

    def bw(g):
        return (np.matmul(np.matmul(ah.T, g), aw),)

    return record("resize", out, (x,), bw)


# ---------------------------------------------------------------------------
# normalisation

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    if profiler.active():
        profiler.tally("softmax", elementwise=x.data.size)
    return record("softmax", out, (x,), bw)


def softmax_rows(x: Tensor) -> Tensor:
    return softmax(x, axis=-1)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    if profiler.active():
        profiler.tally("log_softmax", elementwise=x.data.size)
    return record("log_softmax", out, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis."""
    d = x.shape[-1]
    if d == 0:
        raise ValueError("layer_norm over an empty axis")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine params {gamma.shape} do not match feature dim {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data
    red = tuple(range(x.ndim - 1))

    def bw(g):
        gg = g * gamma.data
        gx = rstd * (gg - gg.mean(axis=-1, keepdims=True) - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    if profiler.active():
        profiler.tally("layer_norm", elementwise=x.data.size)
    return record("layer_norm", out, (x, gamma, beta), bw)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation over (B, H, W).

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance, torch convention).
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects [B,C,H,W], got {x.shape}")
    b, c, h, w = x.shape
    m = b * h * w
    if m == 0:
        raise ValueError("batch_norm over an empty reduction")
    shape = (1, c, 1, 1)
    xd = x.data
    if training:
        mu = xd.mean(axis=(0, 2, 3), keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        unbiased = var * (m / max(m - 1, 1))
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(c).astype(running_mean.dtype)
        running_var *= 1 - momentum
        running_var += momentum * unbiased.reshape(c).astype(running_var.dtype)
    else:
        mu = running_mean.reshape(shape).astype(xd.dtype)
        xc = xd - mu
        var = running_var.reshape(shape).astype(xd.dtype)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def bw(g):
        gg = g * gamma.data.reshape(shape)
        if training:
            gx = rstd * (gg - gg.mean(axis=(0, 2, 3), keepdims=True)
                         - xhat * (gg * xhat).mean(axis=(0, 2, 3), keepdims=True))
        else:
            gx = gg * rstd
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    if profiler.active():
        profiler.tally("batch_norm", elementwise=x.data.size)
    return record("batch_norm", out.astype(xd.dtype, copy=False), (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# activations

def sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split form avoids overflow in exp for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    out = sigmoid_np(x.data)
    if profiler.active():
        profiler.tally("sigmoid", elementwise=x.data.size)
    return record("sigmoid", out, (x,), lambda g: (g * out * (1 - out),))


def silu(x: Tensor) -> Tensor:
    xd = x.data
    sg = sigmoid_np(xd)
    if profiler.active():
        profiler.tally("silu", elementwise=x.data.size)
    return record("silu", xd * sg, (x,), lambda g: (g * sg * (1 + xd * (1 - sg)),))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    xd = x.data
    cdf = (0.5 * (1.0 + erf(xd * _SQRT1_2))).astype(xd.dtype)
    pdf = (_INV_SQRT_2PI * np.exp(-0.5 * xd * xd)).astype(xd.dtype)
    if profiler.active():
        profiler.tally("gelu", elementwise=x.data.size)
    return record("gelu", xd * cdf, (x,), lambda g: (g * (cdf + xd * pdf),))


def relu(x: Tensor) -> Tensor:
    xd = x.data
    mask = xd > 0
    if profiler.active():
        profiler.tally("relu", elementwise=x.data.size)
    return record("relu", np.where(mask, xd, 0).astype(xd.dtype), (x,), lambda g: (g * mask,))


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    out = np.maximum(xd, 0) + np.log1p(np.exp(-np.abs(xd)))
    if profiler.active():
        profiler.tally("softplus", elementwise=x.data.size)
    return record("softplus", out.astype(xd.dtype), (x,), lambda g: (g * sigmoid_np(xd),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "silu":
        return silu(x)
    if kind == "gelu":
        return gelu(x)
    if kind == "relu":
        return relu(x)
    if kind in ("identity", "none"):
        return x
    raise ValueError(f"unknown activation '{kind}'")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight ``[out, in]``."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} != weight in-dim {weight.shape[1]}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
    lead = tuple(range(x.ndim - 1))
    if profiler.active():
        profiler.tally("linear", macs=out.size * weight.shape[1])

    def bw(g):
        gx = g @ wd
        gw = g.reshape(-1, g.shape[-1]).T @ xd.reshape(-1, xd.shape[-1])
        gb = g.sum(axis=lead) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return record("linear", out, inputs, bw)
