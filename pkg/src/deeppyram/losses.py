"""Cross-entropy log-dice loss and the multi-scale pyramid loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, DomainError
from .tensor import Tensor

PROB_CLAMP = 1e-7


@dataclass
class LossConfig:
    lam: float = 0.8
    smooth: float = 1.0
    pl_weights: tuple = (0.75, 0.5, 0.25)
    binary_mode: bool = False

    def __post_init__(self):
        self.pl_weights = tuple(float(w) for w in self.pl_weights)
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lam must lie in [0, 1], got {self.lam}")
        if self.smooth <= 0:
            raise ConfigError(f"smooth must be positive, got {self.smooth}")
        if len(self.pl_weights) != 3 or any(not 0.0 <= w <= 1.0 for w in self.pl_weights):
            raise ConfigError(f"pl_weights must be three values in [0, 1], got {self.pl_weights}")

    def to_dict(self) -> dict:
        return {"lam": self.lam, "smooth": self.smooth, "pl_weights": list(self.pl_weights), "binary_mode": self.binary_mode}

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        return cls(**d)


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """``(N, H, W)`` integer labels to ``(N, K, H, W)`` indicator maps."""
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise DimensionError(f"labels must be (N, H, W), got {labels.shape}")
    return (labels[:, None] == np.arange(num_classes).reshape(1, -1, 1, 1)).astype(dtype)


def as_target(target, pred: Tensor) -> np.ndarray:
    """Turn integer labels or indicator maps into an array shaped like ``pred``."""
    t = np.asarray(target)
    if t.shape == pred.shape:
        return t.astype(pred.dtype, copy=False)
    if t.ndim == 3 and pred.ndim == 4:
        if pred.shape[1] == 1:
            return t[:, None].astype(pred.dtype)
        return one_hot(t, pred.shape[1], pred.dtype)
    raise DimensionError(f"target shape {t.shape} does not match prediction {pred.shape}")


def ce_log_dice(pred: Tensor, target, cfg: LossConfig = LossConfig()) -> Tensor:
    """``lam * BCE - (1 - lam) * log(soft dice)``, averaged over channels.

    ``pred`` holds probabilities ``(N, K, H, W)``; each channel is scored
    as a binary problem against its indicator map.  Log arguments are
    clamped from below at 1e-7.
    """
    t = as_target(target, pred)
    if pred.shape != t.shape:
        raise DimensionError(f"prediction {pred.shape} and target {t.shape} differ")
    p = pred.data
    if p.size and (p.min() < 0.0 or p.max() > 1.0 or not np.isfinite(p).all()):
        raise DomainError("predictions must be probabilities in [0, 1]")
    axes = tuple(i for i in range(pred.ndim) if i != 1) if pred.ndim > 1 else None

    log_p = T.log(T.clamp(pred, PROB_CLAMP, 1.0))
    log_q = T.log(T.clamp(T.sub(1.0, pred), PROB_CLAMP, 1.0))
    bce = -(T.mean(log_p * t + log_q * (1.0 - t), axis=axes))
    inter = T.tsum(pred * t, axis=axes)
    denom = T.tsum(pred, axis=axes) + t.sum(axis=axes)
    dice = (inter * 2.0 + cfg.smooth) / (denom + cfg.smooth)
    per_channel = bce * cfg.lam - T.log(dice) * (1.0 - cfg.lam)
    return T.mean(per_channel)


def downsample_gt(mask: np.ndarray, factor: int, mode: str = "nearest") -> np.ndarray:
    """Shrink a label mask by an integer factor along the last two axes.

    ``nearest`` keeps the top-left label of each block; ``maxpool`` keeps
    the block maximum (logical OR for binary masks).
    """
    m = np.asarray(mask)
    if factor == 1:
        return m
    h, w = m.shape[-2:]
    if h % factor or w % factor:
        raise DimensionError(f"mask {h}x{w} not divisible by {factor}")
    if mode == "nearest":
        return np.ascontiguousarray(m[..., ::factor, ::factor])
    if mode == "maxpool":
        blocks = m.reshape(m.shape[:-2] + (h // factor, factor, w // factor, factor))
        return blocks.max(axis=(-3, -1))
    raise ConfigError(f"unknown downsampling mode {mode!r}")


def weighted_pyramid_sum(losses: Sequence[Union[Tensor, float]], cfg: LossConfig = LossConfig()):
    """``L1 + a*L2 + b*L4 + c*L8``; a lone loss is returned unchanged."""
    if len(losses) == 1:
        return losses[0]
    if len(losses) != 4:
        raise DimensionError(f"pyramid loss needs 1 or 4 scales, got {len(losses)}")
    total = losses[0]
    for w, loss in zip(cfg.pl_weights, losses[1:]):
        total = total + loss * w
    return total


def pyramid_loss(outputs, gt: np.ndarray, cfg: LossConfig = LossConfig()) -> Tensor:
    """Score every output scale against the correspondingly downscaled labels."""
    scales = list(outputs.scales if hasattr(outputs, "scales") else outputs)
    mode = "maxpool" if cfg.binary_mode else "nearest"
    gt = np.asarray(gt)
    losses = []
    for i, pred in enumerate(scales):
        target = downsample_gt(gt, 2**i, mode)
        losses.append(ce_log_dice(pred, target, cfg))
    return weighted_pyramid_sum(losses, cfg)
