"""MAE / accuracy / Dice / IoU on discretised masks, in percent."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np


@dataclass
class MetricsReport:
    mae: float
    acc: float
    dice: float
    iou: float
    per_class: dict[int, dict[str, float]] = field(default_factory=dict)
    count: int = 1

    def as_row(self) -> dict[str, float]:
        return {"MAE": self.mae, "Acc": self.acc, "Dice": self.dice, "IoU": self.iou}

    def table(self) -> str:
        lines = [f"{'':<10}{'MAE':>8}{'Acc':>8}{'Dice':>8}{'IoU':>8}",
                 f"{'overall':<10}{self.mae:8.2f}{self.acc:8.2f}{self.dice:8.2f}{self.iou:8.2f}"]
        if len(self.per_class) > 1:
            for c, d in sorted(self.per_class.items()):
                lines.append(f"{'class ' + str(c):<10}{'':>8}{'':>8}{d['dice']:8.2f}{d['iou']:8.2f}")
        lines.append(f"({self.count} image{'s' if self.count != 1 else ''})")
        return "\n".join(lines)


def compute_metrics(pred: np.ndarray, gt: np.ndarray, num_classes: int = 1) -> MetricsReport:
    """Metrics for one image. ``pred`` and ``gt`` hold class indices (0 = background)."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    per_class = {}
    abs_err = 0.0
    for c in range(1, num_classes + 1):
        p, g = pred == c, gt == c
        inter = np.logical_and(p, g).sum()
        ps, gs = p.sum(), g.sum()
        union = ps + gs - inter
        if ps + gs == 0:
            dice = iou = 100.0
        else:
            dice = 100.0 * 2 * inter / (ps + gs)
            iou = 100.0 * inter / union
        per_class[c] = {"dice": float(dice), "iou": float(iou)}
        abs_err += np.logical_xor(p, g).mean()
    mae = 100.0 * abs_err / num_classes
    acc = 100.0 * (pred == gt).mean()
    dice = float(np.mean([d["dice"] for d in per_class.values()]))
    iou = float(np.mean([d["iou"] for d in per_class.values()]))
    return MetricsReport(float(mae), float(acc), dice, iou, per_class)


def aggregate(reports: Iterable[MetricsReport]) -> MetricsReport:
    """Average per-image reports."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to aggregate")
    classes = sorted(reports[0].per_class)
    per_class = {c: {k: float(np.mean([r.per_class[c][k] for r in reports])) for k in ("dice", "iou")}
                 for c in classes}
    return MetricsReport(
        float(np.mean([r.mae for r in reports])),
        float(np.mean([r.acc for r in reports])),
        float(np.mean([r.dice for r in reports])),
        float(np.mean([r.iou for r in reports])),
        per_class,
        len(reports),
    )


def evaluate_masks(preds, gts, num_classes: int = 1) -> MetricsReport:
    return aggregate(compute_metrics(p, g, num_classes) for p, g in zip(preds, gts))
