"""Pure numpy implementations of the patch kernels.

Each loop runs over kernel offsets (at most K*K iterations) and does the
spatial work as strided slices, so the per-element accumulation order is
(ki, kj)-major. The Cython module follows the same order, which keeps the two
backends bit-identical.
"""
import numpy as np


def im2col(xp, k, s, ho, wo):
    """Padded ``[B, C, Hp, Wp]`` -> columns ``[B, C*k*k, ho*wo]``."""
    b, c = xp.shape[:2]
    cols = np.empty((b, c, k, k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
    return cols.reshape(b, c * k * k, ho * wo)


def col2im(cols, hp, wp, k, s, ho, wo):
    """Adjoint of :func:`im2col`: scatter-add columns back onto the padded grid."""
    b = cols.shape[0]
    c = cols.shape[1] // (k * k)
    cols = cols.reshape(b, c, k, k, ho, wo)
    dx = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += cols[:, :, i, j]
    return dx


def maxpool_forward(xp, k, s, ho, wo):
    """Window max over a padded input. Returns (out, argmax) with argmax = ki*k + kj.

    Ties keep the first window offset in row-major order.
    """
    b, c = xp.shape[:2]
    out = np.full((b, c, ho, wo), -np.inf, dtype=xp.dtype)
    idx = np.zeros((b, c, ho, wo), dtype=np.int32)
    for i in range(k):
        for j in range(k):
            v = xp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
            better = v > out
            out[better] = v[better]
            idx[better] = i * k + j
    return out, idx


def maxpool_backward(g, idx, hp, wp, k, s):
    b, c, ho, wo = g.shape
    dx = np.zeros((b, c, hp, wp), dtype=g.dtype)
    zero = np.zeros((), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += np.where(idx == i * k + j, g, zero)
    return dx
