"""Dice scoring and evaluation aggregation.

Conventions: Dice of two empty sets is 1.0 (perfect agreement on absence),
exactly one empty set is 0.0. Mean Dice averages foreground classes only;
the background class is reported separately.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ContractError, DataError
from .volume import LabelMap, Volume


def dice_score(pred: LabelMap, gt: LabelMap, class_id: int) -> float:
    """2|A n B| / (|A| + |B|) for the voxel sets of one class."""
    if pred.extents != gt.extents:
        raise ContractError(f"extent mismatch: pred {pred.extents} vs gt {gt.extents}")
    a = pred.classes == class_id
    b = gt.classes == class_id
    na = int(a.sum())
    nb = int(b.sum())
    if na == 0 and nb == 0:
        return 1.0
    inter = int(np.logical_and(a, b).sum())
    return 2.0 * inter / (na + nb)


@dataclass
class MetricReport:
    """Per-class Dice averaged over items, plus the per-item breakdown."""

    per_class_dice: dict[int, float]
    mean_foreground_dice: float
    per_item: list[dict[int, float]]
    num_items: int

    def to_dict(self) -> dict:
        return {
            "per_class_dice": {str(k): v for k, v in self.per_class_dice.items()},
            "mean_foreground_dice": self.mean_foreground_dice,
            "per_item": [{str(k): v for k, v in row.items()} for row in self.per_item],
            "num_items": self.num_items,
        }

    @staticmethod
    def from_dict(d: dict) -> "MetricReport":
        return MetricReport(
            per_class_dice={int(k): float(v) for k, v in d["per_class_dice"].items()},
            mean_foreground_dice=float(d["mean_foreground_dice"]),
            per_item=[{int(k): float(v) for k, v in row.items()} for row in d["per_item"]],
            num_items=int(d["num_items"]),
        )


PredictFn = Callable[[Volume], "LabelMap | object"]


def _as_labels(prediction) -> LabelMap:
    if isinstance(prediction, LabelMap):
        return prediction
    labels = getattr(prediction, "labels", None)
    if isinstance(labels, LabelMap):
        return labels
    raise ContractError("predict function must return a LabelMap or an object with .labels")


def evaluate(predict: PredictFn, items: list[tuple[Volume, LabelMap | None]]) -> MetricReport:
    """Run `predict` over labeled items; per-class Dice averaged over items,
    then averaged over foreground classes (background class 0 excluded from
    the mean, reported separately)."""
    if not items:
        raise DataError("evaluate needs at least one item")
    per_item: list[dict[int, float]] = []
    num_classes = None
    for vol, gt in items:
        if gt is None:
            raise DataError("evaluate requires labeled items")
        if num_classes is None:
            num_classes = gt.num_classes
        pred = _as_labels(predict(vol))
        per_item.append({c: dice_score(pred, gt, c) for c in range(num_classes)})
    per_class = {
        c: sum(row[c] for row in per_item) / len(per_item) for c in range(num_classes)
    }
    foreground = [per_class[c] for c in range(1, num_classes)]
    mean_fg = sum(foreground) / len(foreground)
    return MetricReport(per_class, mean_fg, per_item, len(per_item))


def epochs_to_threshold(curve: list[float], threshold: float) -> Optional[int]:
    """1-based index of the first epoch whose value reaches the threshold;
    None if it never does."""
    if not 0.0 < threshold < 1.0:
        raise ContractError(f"threshold must be in (0, 1), got {threshold}")
    for i, value in enumerate(curve):
        if value >= threshold:
            return i + 1
    return None
