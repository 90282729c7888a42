"""IoU / Dice scoring and aggregate reports."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np


def iou(pred_mask, true_mask) -> float:
    """Jaccard index of two boolean masks; 1.0 when both are empty."""
    a = np.asarray(pred_mask, dtype=bool)
    b = np.asarray(true_mask, dtype=bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def dice(pred_mask, true_mask) -> float:
    """Dice coefficient (F1) of two boolean masks; 1.0 when both are empty."""
    a = np.asarray(pred_mask, dtype=bool)
    b = np.asarray(true_mask, dtype=bool)
    total = np.count_nonzero(a) + np.count_nonzero(b)
    if total == 0:
        return 1.0
    return 2.0 * np.count_nonzero(a & b) / total


def binarize(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Class labels from ``(N, K, H, W)`` probabilities: argmax, or threshold if K == 1."""
    probs = np.asarray(probs)
    if probs.shape[1] == 1:
        return (probs[:, 0] >= threshold).astype(np.int64)
    return probs.argmax(axis=1)


def image_scores(pred_labels: np.ndarray, true_labels: np.ndarray, num_classes: int):
    """Per-class IoU/Dice for one image, skipping background (class 0).

    Classes absent from both masks are left out of the image average;
    an image where every foreground class is absent scores 1.0.
    """
    classes = range(1, max(num_classes, 2))
    per_iou, per_dice = {}, {}
    for k in classes:
        p, t = pred_labels == k, true_labels == k
        per_iou[k] = iou(p, t)
        per_dice[k] = dice(p, t)
    present = [k for k in classes if np.any(true_labels == k) or np.any(pred_labels == k)]
    if not present:
        return 1.0, 1.0, per_iou, per_dice
    return (
        float(np.mean([per_iou[k] for k in present])),
        float(np.mean([per_dice[k] for k in present])),
        per_iou,
        per_dice,
    )


def _stats(values: Sequence[float]) -> dict:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return {"mean": float("nan"), "std": float("nan"), "min": float("nan"), "max": float("nan")}
    return {"mean": float(v.mean()), "std": float(v.std()), "min": float(v.min()), "max": float(v.max())}


@dataclass
class MetricReport:
    """Per-image scores plus mean, standard deviation, minimum and maximum."""

    ids: List[str] = field(default_factory=list)
    iou: List[float] = field(default_factory=list)
    dice: List[float] = field(default_factory=list)
    class_iou: List[dict] = field(default_factory=list)
    class_dice: List[dict] = field(default_factory=list)

    def add(self, ident: str, iou_value: float, dice_value: float, class_iou=None, class_dice=None) -> None:
        self.ids.append(ident)
        self.iou.append(float(iou_value))
        self.dice.append(float(dice_value))
        self.class_iou.append(dict(class_iou or {}))
        self.class_dice.append(dict(class_dice or {}))

    @property
    def iou_stats(self) -> dict:
        return _stats(self.iou)

    @property
    def dice_stats(self) -> dict:
        return _stats(self.dice)

    @property
    def mean_iou(self) -> float:
        return self.iou_stats["mean"]

    @property
    def mean_dice(self) -> float:
        return self.dice_stats["mean"]

    def per_class(self) -> dict:
        """Mean IoU and Dice of every foreground class over all images."""
        out = {}
        for k in sorted({k for d in self.class_iou for k in d}):
            out[int(k)] = {
                "iou": float(np.mean([d[k] for d in self.class_iou if k in d])),
                "dice": float(np.mean([d[k] for d in self.class_dice if k in d])),
            }
        return out

    def to_dict(self) -> dict:
        return {
            "images": len(self.ids),
            "iou": self.iou_stats,
            "dice": self.dice_stats,
            "per_class": {str(k): v for k, v in self.per_class().items()},
            "per_image": [
                {"id": i, "iou": a, "dice": b} for i, a, b in zip(self.ids, self.iou, self.dice)
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        i, d = self.iou_stats, self.dice_stats
        lines = [
            f"images      {len(self.ids)}",
            f"IoU   mean {i['mean']:.4f}  std {i['std']:.4f}  min {i['min']:.4f}  max {i['max']:.4f}",
            f"Dice  mean {d['mean']:.4f}  std {d['std']:.4f}  min {d['min']:.4f}  max {d['max']:.4f}",
        ]
        for k, v in self.per_class().items():
            lines.append(f"class {k:<4d} IoU {v['iou']:.4f}  Dice {v['dice']:.4f}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id", "iou", "dice"])
        for row in zip(self.ids, self.iou, self.dice):
            writer.writerow([row[0], f"{row[1]:.6f}", f"{row[2]:.6f}"])
        for stat in ("mean", "std", "min", "max"):
            writer.writerow([stat, f"{self.iou_stats[stat]:.6f}", f"{self.dice_stats[stat]:.6f}"])
        return buf.getvalue()


def aggregate(reports: Sequence[MetricReport]) -> MetricReport:
    """Merge several reports (e.g. evaluation batches) into one."""
    merged = MetricReport()
    for r in reports:
        merged.ids.extend(r.ids)
        merged.iou.extend(r.iou)
        merged.dice.extend(r.dice)
        merged.class_iou.extend(r.class_iou)
        merged.class_dice.extend(r.class_dice)
    return merged


def score_batch(probs: np.ndarray, labels: np.ndarray, ids: Sequence[str], num_classes: Optional[int] = None) -> MetricReport:
    num_classes = num_classes or probs.shape[1]
    pred = binarize(probs)
    report = MetricReport()
    for ident, p, t in zip(ids, pred, labels):
        if num_classes == 1:
            a, b = iou(p == 1, t == 1), dice(p == 1, t == 1)
            report.add(ident, a, b, {1: a}, {1: b})
        else:
            a, b, ci, cd = image_scores(p, t, num_classes)
            report.add(ident, a, b, ci, cd)
    return report
