"""PNG figures for training logs, ablation tables and prediction overlays."""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .train import TrainLog  # noqa: E402

# fixed palette for class ids 0..4
PALETTE = np.array(
    [[0, 0, 0], [70, 130, 230], [230, 200, 40], [220, 60, 60], [80, 200, 120]], dtype=np.uint8
)


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # empty metadata keeps the PNG bytes free of version strings
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_training(log: TrainLog, out_dir) -> List[Path]:
    """Loss per step, validation IoU/Dice per epoch and the lr schedule."""
    out = Path(out_dir)
    written = []

    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = [s[1] for s in log.steps]
    ax.plot(steps, [s[3] for s in log.steps], lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    written.append(_save(fig, out / "loss.png"))

    fig, ax = plt.subplots(figsize=(6, 3.5))
    epochs = [e[0] + 1 for e in log.epochs]
    ax.plot(epochs, [e[3] for e in log.epochs], marker="o", label="IoU")
    ax.plot(epochs, [e[4] for e in log.epochs], marker="s", label="Dice")
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation score")
    ax.set_ylim(0, 1)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    written.append(_save(fig, out / "val_scores.png"))

    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.step(epochs, [e[1] for e in log.epochs], where="post")
    ax.set_xlabel("epoch")
    ax.set_ylabel("learning rate")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    written.append(_save(fig, out / "lr_schedule.png"))
    return written


def read_ablation_csv(text: str) -> List[dict]:
    return list(csv.DictReader(io.StringIO(text)))


def plot_ablation(rows: Sequence[dict], path) -> Path:
    """Grouped IoU/Dice bars, one pair per configuration."""
    names = [r["config"] for r in rows]
    iou = np.array([float(r["iou"]) for r in rows])
    dice = np.array([float(r["dice"]) for r in rows])
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(max(6, 0.9 * len(rows) + 2), 4))
    ax.bar(x - 0.2, iou, 0.4, label="IoU %")
    ax.bar(x + 0.2, dice, 0.4, label="Dice %")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=30, ha="right")
    lo = min(iou.min(), dice.min())
    ax.set_ylim(max(0, lo - 10), 100)
    ax.legend()
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def colorize(mask: np.ndarray) -> np.ndarray:
    return PALETTE[np.clip(mask, 0, len(PALETTE) - 1)]


def overlay_figure(image: np.ndarray, truth: np.ndarray, pred: np.ndarray, dice_value: float, path, index: int = 0) -> Path:
    """Image | ground truth | prediction, titled with the per-image Dice in percent."""
    rgb = np.clip(image.transpose(1, 2, 0), 0, 1)
    fig, axes = plt.subplots(1, 3, figsize=(7.5, 2.8))
    panels = [(rgb, "image"), (colorize(truth), "ground truth"), (colorize(pred), f"prediction  {100 * dice_value:.2f}")]
    for ax, (arr, title) in zip(axes, panels):
        ax.imshow(arr, interpolation="nearest")
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    fig.suptitle(f"#{index}", fontsize=9, x=0.02, ha="left")
    fig.tight_layout()
    return _save(fig, path)
