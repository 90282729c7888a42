"""Optimisation loop, evaluation runner and ablation harness."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import checkpoint
from .data.augment import AugmentConfig, augment
from .data.io import stack
from .data.synth import SegSample
from .errors import ConfigError, DomainError, NumericalError
from .losses import LossConfig, pyramid_loss
from .metrics import MetricReport, aggregate, score_batch
from .model import DeepPyram, ModelConfig, count_parameters
from .tensor import Tensor, no_grad

LR_GRID = (0.0005, 0.0002, 0.001)


@dataclass
class TrainConfig:
    initial_lr: float = 0.001
    epochs: int = 20
    lr_decay: float = 0.8
    decay_every: int = 2
    grad_clip: float = 0.1
    clip_mode: str = "value"  # or "norm"
    optimizer: str = "sgd"  # or "adam"
    momentum: float = 0.9
    batch_size: int = 4
    seed: int = 0
    eval_batch_size: int = 8

    def __post_init__(self):
        if not self.initial_lr > 0:
            raise ConfigError(f"initial_lr must be positive, got {self.initial_lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be at least 1, got {self.epochs}")
        if not self.grad_clip > 0:
            raise ConfigError(f"grad_clip must be positive, got {self.grad_clip}")
        if self.clip_mode not in ("value", "norm"):
            raise ConfigError(f"clip_mode must be 'value' or 'norm', got {self.clip_mode!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.batch_size < 1 or self.eval_batch_size < 1 or self.decay_every < 1:
            raise ConfigError("batch sizes and decay_every must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError(f"lr_decay must lie in (0, 1], got {self.lr_decay}")

    def lr_at(self, epoch: int) -> float:
        return learning_rate(self.initial_lr, epoch, self.lr_decay, self.decay_every)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def learning_rate(initial_lr: float, epoch: int, decay: float = 0.8, every: int = 2) -> float:
    """Step decay: ``initial_lr * decay ** (epoch // every)`` for zero-based ``epoch``."""
    return initial_lr * decay ** (epoch // every)


def clip_gradients(params: Sequence[Tensor], threshold: float, mode: str = "value") -> None:
    """Clamp every gradient element to [-threshold, threshold] in place.

    ``mode="norm"`` instead rescales all gradients together so their joint
    L2 norm is at most ``threshold``.
    """
    grads = [p.grad for p in params if p.grad is not None]
    if mode == "value":
        for g in grads:
            np.clip(g, -threshold, threshold, out=g)
    elif mode == "norm":
        total = math.sqrt(sum(float(np.dot(g.ravel(), g.ravel())) for g in grads))
        if total > threshold:
            for g in grads:
                g *= threshold / total
    else:
        raise ConfigError(f"unknown clip mode {mode!r}")


class Optimizer:
    """SGD with momentum or Adam over a fixed parameter list."""

    def __init__(self, params: List[Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.state = [np.zeros_like(p.data) for p in params]
        self.second = [np.zeros_like(p.data) for p in params] if cfg.optimizer == "adam" else None
        self.steps = 0

    def step(self, lr: float) -> None:
        self.steps += 1
        cfg = self.cfg
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad.astype(p.dtype, copy=False)
            m = self.state[i]
            if self.second is None:
                m *= cfg.momentum
                m += g
                p.data -= p.dtype.type(lr) * m
            else:
                b1, b2 = 0.9, 0.999
                v = self.second[i]
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                mhat = m / (1 - b1**self.steps)
                vhat = v / (1 - b2**self.steps)
                p.data -= (lr * mhat / (np.sqrt(vhat) + 1e-8)).astype(p.dtype)


@dataclass
class TrainLog:
    """Per-step losses and per-epoch summaries.  Wall time is kept apart so the CSV is reproducible."""

    steps: List[tuple] = field(default_factory=list)  # (epoch, step, lr, loss)
    epochs: List[tuple] = field(default_factory=list)  # (epoch, lr, train_loss, val_iou, val_dice)
    wall_time: List[float] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "epoch", "step", "lr", "loss", "val_iou", "val_dice"])
        for e, s, lr, loss in self.steps:
            w.writerow(["step", e, s, repr(lr), f"{loss:.8g}", "", ""])
        for e, lr, loss, vi, vd in self.epochs:
            w.writerow(["epoch", e, "", repr(lr), f"{loss:.8g}", f"{vi:.8g}", f"{vd:.8g}"])
        return buf.getvalue()

    def timing_csv(self) -> str:
        rows = ["epoch,seconds"] + [f"{i},{t:.3f}" for i, t in enumerate(self.wall_time)]
        return "\n".join(rows) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "TrainLog":
        log = cls()
        for row in csv.DictReader(io.StringIO(text)):
            if row["kind"] == "step":
                log.steps.append((int(row["epoch"]), int(row["step"]), float(row["lr"]), float(row["loss"])))
            elif row["kind"] == "epoch":
                log.epochs.append(
                    (int(row["epoch"]), float(row["lr"]), float(row["loss"]), float(row["val_iou"]), float(row["val_dice"]))
                )
        return log


@dataclass
class TrainResult:
    model: DeepPyram  # weights of the best validation epoch
    log: TrainLog
    best_epoch: int
    best_iou: float
    checkpoint: bytes

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "best.ckpt").write_bytes(self.checkpoint)
        (out / "train_log.csv").write_text(self.log.to_csv(), encoding="utf-8")
        (out / "timing.csv").write_text(self.log.timing_csv(), encoding="utf-8")


def _batches(n: int, size: int, order: np.ndarray):
    for i in range(0, n, size):
        yield order[i : i + size]


def evaluate(model: DeepPyram, dataset: Sequence[SegSample], batch_size: int = 8) -> MetricReport:
    """Score the master (full-resolution) branch; other heads are ignored."""
    was_training = model.training
    model.eval()
    reports = []
    try:
        with no_grad():
            for start in range(0, len(dataset), batch_size):
                chunk = dataset[start : start + batch_size]
                images, masks = stack(chunk)
                probs = model.predict(Tensor(images)).data
                reports.append(score_batch(probs, masks, [s.ident for s in chunk], model.config.num_classes))
    finally:
        model.train(was_training)
    return aggregate(reports)


def evaluate_checkpoint(path, dataset, batch_size: int = 8) -> MetricReport:
    model, _ = checkpoint.load(path)
    return evaluate(model, dataset, batch_size)


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train_set: Sequence[SegSample],
    val_set: Optional[Sequence[SegSample]] = None,
    loss_cfg: LossConfig = LossConfig(),
    aug_cfg: AugmentConfig = AugmentConfig(),
    progress: Optional[Callable[[str], None]] = None,
) -> TrainResult:
    """Train from scratch; keeps the weights of the best validation-IoU epoch.

    Without a validation set the training set is scored instead.
    """
    if not train_set:
        raise ConfigError("training set is empty")
    val_set = list(val_set) if val_set else list(train_set)
    model = DeepPyram(model_cfg).train()
    params = model.parameters()
    opt = Optimizer(params, train_cfg)
    shuffle_rng = np.random.default_rng([train_cfg.seed, 0])
    aug_rng = np.random.default_rng([train_cfg.seed, 1])
    log = TrainLog()
    best = (-1.0, -1, b"")
    step = 0
    n = len(train_set)
    for epoch in range(train_cfg.epochs):
        t0 = time.perf_counter()
        lr = train_cfg.lr_at(epoch)
        losses = []
        for idx in _batches(n, train_cfg.batch_size, shuffle_rng.permutation(n)):
            pairs = [augment(train_set[i].image, train_set[i].mask, aug_cfg, aug_rng) for i in idx]
            images = np.stack([p[0] for p in pairs]).astype(np.float32)
            masks = np.stack([p[1] for p in pairs]).astype(np.int64)
            where = f"step {step} (epoch {epoch}, lr {lr:g})"
            try:
                out = model(Tensor(images))
            except DomainError as exc:
                raise NumericalError(f"{exc} at {where}") from exc
            if not all(np.isfinite(s.data).all() for s in out.scales):
                raise NumericalError(f"non-finite prediction at {where}")
            loss = pyramid_loss(out, masks, loss_cfg)
            value = float(loss.item())
            if not math.isfinite(value):
                raise NumericalError(f"non-finite loss {value} at {where}")
            model.zero_grad()
            loss.backward()
            clip_gradients(params, train_cfg.grad_clip, train_cfg.clip_mode)
            opt.step(lr)
            log.steps.append((epoch, step, lr, value))
            losses.append(value)
            step += 1
        report = evaluate(model, val_set, train_cfg.eval_batch_size)
        log.epochs.append((epoch, lr, float(np.mean(losses)), report.mean_iou, report.mean_dice))
        log.wall_time.append(time.perf_counter() - t0)
        if report.mean_iou > best[0]:
            meta = {"epoch": epoch, "val_iou": round(report.mean_iou, 8), "train": train_cfg.to_dict()}
            best = (report.mean_iou, epoch, checkpoint.to_bytes(model, meta))
        if progress:
            progress(
                f"epoch {epoch + 1}/{train_cfg.epochs} lr {lr:.6g} loss {np.mean(losses):.4f} "
                f"val IoU {report.mean_iou:.4f} Dice {report.mean_dice:.4f} ({log.wall_time[-1]:.1f}s)"
            )
    best_model, _ = checkpoint.from_bytes(best[2])
    return TrainResult(best_model, log, best[1], best[0], best[2])


# Ablation -----------------------------------------------------------------

MODULE_ROWS = (
    ("baseline", dict(enable_pvf=False, enable_dpr=False, enable_pl=False)),
    ("PVF", dict(enable_pvf=True, enable_dpr=False, enable_pl=False)),
    ("DPR", dict(enable_pvf=False, enable_dpr=True, enable_pl=False)),
    ("PVF+DPR", dict(enable_pvf=True, enable_dpr=True, enable_pl=False)),
    ("PVF+DPR+PL", dict(enable_pvf=True, enable_dpr=True, enable_pl=True)),
)
ALTERNATIVE_ROWS = (
    ("ASPP+ for DPR", dict(decoder_alternative="aspp_plus")),
    ("PPM for PVF", dict(decoder_alternative="ppm")),
)
UPSAMPLE_ROWS = tuple((f"upsample {m}", dict(upsample_mode=m)) for m in ("bilinear", "transposed", "pixel_shuffle"))


@dataclass
class AblationRow:
    group: str
    name: str
    config: ModelConfig
    params: int
    iou: List[float] = field(default_factory=list)
    dice: List[float] = field(default_factory=list)

    @property
    def mean_iou(self) -> float:
        return float(np.mean(self.iou)) if self.iou else float("nan")

    @property
    def mean_dice(self) -> float:
        return float(np.mean(self.dice)) if self.dice else float("nan")


def ablation_rows(base: ModelConfig, groups=("modules", "alternatives", "upsampling")) -> List[AblationRow]:
    """The 5 + 2 + 3 configurations, all derived from ``base``."""
    full = dict(enable_pvf=True, enable_dpr=True, enable_pl=True, decoder_alternative="none", upsample_mode="bilinear")
    table = {
        "modules": [(n, {**full, **c}) for n, c in MODULE_ROWS],
        "alternatives": [(n, {**full, **c}) for n, c in ALTERNATIVE_ROWS],
        "upsampling": [(n, {**full, **c}) for n, c in UPSAMPLE_ROWS],
    }
    rows = []
    for g in groups:
        for name, changes in table[g]:
            cfg = base.replace(**changes)
            rows.append(AblationRow(g, name, cfg, count_parameters(cfg)))
    return rows


@dataclass
class AblationTable:
    rows: List[AblationRow]
    seeds: List[int]

    def row(self, name: str) -> AblationRow:
        return next(r for r in self.rows if r.name == name)

    def _toggles(self, r: AblationRow) -> tuple:
        c = r.config
        yes = lambda b: "x" if b else ""  # noqa: E731
        pvf = c.enable_pvf and c.decoder_alternative != "ppm"
        dpr = c.enable_dpr and c.decoder_alternative != "aspp_plus"
        return yes(pvf), yes(dpr), yes(c.enable_pl), c.decoder_alternative, c.upsample_mode

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group", "config", "pvf", "dpr", "pl", "alternative", "upsample", "params", "iou", "dice", "iou_std", "seeds"])
        for r in self.rows:
            w.writerow(
                [r.group, r.name, *self._toggles(r), r.params, f"{100 * r.mean_iou:.2f}", f"{100 * r.mean_dice:.2f}",
                 f"{100 * float(np.std(r.iou)):.2f}" if r.iou else "", len(r.iou)]
            )
        return buf.getvalue()

    def to_text(self) -> str:
        head = f"{'Config':<20}{'PVF':^5}{'DPR':^5}{'PL':^5}{'Params':>12}{'IoU%':>9}{'Dice%':>9}"
        lines = []
        group = None
        for r in self.rows:
            if r.group != group:
                group = r.group
                lines += ["", f"[{group}]", head, "-" * len(head)]
            pvf, dpr, pl, _, _ = self._toggles(r)
            lines.append(
                f"{r.name:<20}{pvf:^5}{dpr:^5}{pl:^5}{r.params:>12,d}{100 * r.mean_iou:>9.2f}{100 * r.mean_dice:>9.2f}"
            )
        lines.append("")
        lines.append(f"seeds: {', '.join(map(str, self.seeds))}")
        return "\n".join(lines[1:]) + "\n"


def ablate(
    base: ModelConfig,
    train_cfg: TrainConfig,
    train_set,
    test_set,
    seeds: Sequence[int] = (0, 1, 2),
    val_set=None,
    loss_cfg: LossConfig = LossConfig(),
    aug_cfg: AugmentConfig = AugmentConfig(),
    groups=("modules", "alternatives", "upsampling"),
    progress: Optional[Callable[[str], None]] = None,
) -> AblationTable:
    """Train every configuration once per seed and report mean test IoU/Dice."""
    rows = ablation_rows(base, groups)
    done = {}
    for r in rows:
        key = repr(sorted(r.config.to_dict().items()))
        for seed in seeds:
            if (key, seed) not in done:
                res = train(
                    r.config.replace(seed=seed),
                    TrainConfig(**{**train_cfg.to_dict(), "seed": seed}),
                    train_set, val_set, loss_cfg, aug_cfg,
                )
                rep = evaluate(res.model, test_set, train_cfg.eval_batch_size)
                done[(key, seed)] = (rep.mean_iou, rep.mean_dice)
                if progress:
                    progress(f"{r.name} seed {seed}: IoU {rep.mean_iou:.4f} Dice {rep.mean_dice:.4f}")
            iou_v, dice_v = done[(key, seed)]
            r.iou.append(iou_v)
            r.dice.append(dice_v)
    return AblationTable(rows, list(seeds))
