"""Mini-batch training loop and held-out evaluation."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .config import TrainConfig
from .data import Sample, augment, stack
from .losses import segmentation_loss
from .metrics import MetricsReport, evaluate_masks
from .model import QTSeg
from .optim import AdamW, lr_at
from .tensor import GradTape, Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainHistory:
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    evals: list[tuple[int, MetricsReport]] = field(default_factory=list)
    seconds: float = 0.0

    def moving_average(self, window: int = 10) -> np.ndarray:
        x = np.asarray(self.losses)
        if len(x) < window:
            return x
        return np.convolve(x, np.ones(window) / window, mode="valid")


def train_step(model: QTSeg, opt: AdamW, images: np.ndarray, masks: np.ndarray, lr: float) -> float:
    model.train()
    opt.zero_grad()
    with GradTape() as tape:
        logits = model(Tensor(images))
        loss = segmentation_loss(logits, masks)
    tape.backward(loss)
    opt.step(lr)
    return loss.item()


def evaluate(model: QTSeg, samples: Sequence[Sample], batch_size: int = 8) -> MetricsReport:
    images, masks = stack(samples)
    preds = model.predict(images, batch_size)
    return evaluate_masks(preds, masks, model.config.num_classes)


def fit(model: QTSeg, train_set: Sequence[Sample], cfg: TrainConfig,
        eval_set: Sequence[Sample] | None = None,
        callback: Callable[[int, float], None] | None = None) -> TrainHistory:
    """Train for ``cfg.steps`` optimiser steps.

    An epoch is one pass over ``train_set``; the learning rate follows the
    step-decay schedule in epochs.
    """
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    steps_per_epoch = max(1, math.ceil(len(train_set) / cfg.batch_size))
    hist = TrainHistory()
    order = rng.permutation(len(train_set))
    start = time.perf_counter()
    for step in range(cfg.steps):
        epoch, pos = divmod(step, steps_per_epoch)
        if pos == 0 and step:
            order = rng.permutation(len(train_set))
        idx = order[pos * cfg.batch_size:(pos + 1) * cfg.batch_size]
        batch = [train_set[i] for i in idx]
        if cfg.augment:
            batch = [augment(s, rng) for s in batch]
        images, masks = stack(batch)
        lr = lr_at(epoch, cfg.lr, 0.1, cfg.decay_every_epochs, cfg.min_lr)
        value = train_step(model, opt, images, masks, lr)
        hist.losses.append(value)
        hist.lrs.append(lr)
        if callback is not None:
            callback(step, value)
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            log.info("step %d epoch %d lr %.1e loss %.4f", step + 1, epoch, lr,
                     float(np.mean(hist.losses[-cfg.log_every:])))
        if eval_set is not None and cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            report = evaluate(model, eval_set, cfg.batch_size)
            hist.evals.append((step + 1, report))
            log.info("step %d held-out dice %.2f iou %.2f", step + 1, report.dice, report.iou)
    hist.seconds = time.perf_counter() - start
    model.eval()
    return hist
