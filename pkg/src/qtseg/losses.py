"""Segmentation objective: equal mix of soft Dice and pixelwise cross-entropy."""
from __future__ import annotations

import numpy as np

from . import functional as F
from .tensor import ShapeError, Tensor, concat, exp, mean, mul, reshape, split, sum_


def soft_dice_loss(prob: Tensor, target: np.ndarray, smooth: float = 1.0) -> Tensor:
    """1 - (2 sum(p g) + s) / (sum p + sum g + s), averaged over leading dims.

    prob and target are ``[B, C, H, W]``.
    """
    g = Tensor(target, dtype=prob.dtype)
    inter = sum_(prob * g, axis=(2, 3))
    denom = sum_(prob, axis=(2, 3)) + Tensor(target.sum(axis=(2, 3)) + smooth, dtype=prob.dtype)
    return 1.0 - mean((2.0 * inter + smooth) / denom)


def segmentation_loss(logits: Tensor, mask: np.ndarray, dice_weight: float = 0.5) -> Tensor:
    """logits ``[B, N, H, W]`` (or unbatched ``[N, H, W]``), mask of class indices."""
    if logits.ndim == 3:
        logits = reshape(logits, (1,) + logits.shape)
        mask = mask[None]
    b, n, h, w = logits.shape
    if mask.shape != (b, h, w):
        raise ShapeError(f"mask shape {mask.shape} does not match logits {logits.shape}")
    if n == 1:
        g = (mask == 1).astype(logits.dtype)[:, None]
        # BCE with logits: softplus(z) - z*g
        bce = mean(F.softplus(logits) - logits * Tensor(g, dtype=logits.dtype))
        dice = soft_dice_loss(F.sigmoid(logits), g)
        ce = bce
    else:
        bg = Tensor(np.zeros((b, 1, h, w)), dtype=logits.dtype)
        logp = F.log_softmax(concat([bg, logits], axis=1), axis=1)
        onehot = (mask[:, None] == np.arange(n + 1)[None, :, None, None]).astype(logits.dtype)
        ce = mul(sum_(logp * Tensor(onehot, dtype=logits.dtype)), -1.0 / (b * h * w))
        # Dice over foreground channels only
        fg = split(exp(logp), [1, n], axis=1)[1]
        dice = soft_dice_loss(fg, onehot[:, 1:])
    return dice_weight * dice + (1.0 - dice_weight) * ce


loss = segmentation_loss
