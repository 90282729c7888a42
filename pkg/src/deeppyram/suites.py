"""Finite-difference gradient suites for every differentiable primitive.

Each case builds a scalar objective ``sum(R * op(inputs))`` with a fixed
random weighting ``R``.  Inputs to piecewise-smooth ops are drawn away
from their kinks so that central differences stay on one side.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence

import numpy as np

from . import tensor as T
from .deform import compute_offsets, deformable_conv2d
from .losses import LossConfig, ce_log_dice, pyramid_loss
from .model import DeformablePyramidReception, PyramidViewFusion
from .nn import BatchNorm2d, Upsample
from .tensor import numeric_grad_check

GROUPS = ("conv", "deform", "pool", "upsample", "norm", "act", "loss", "pvf", "dpr")


@dataclass
class Case:
    name: str
    group: str
    build: Callable[[np.random.Generator], dict]


@dataclass
class CaseResult:
    name: str
    group: str
    seed: int
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < 1e-3


def _weighted(fn, out_shape, rng):
    r = rng.standard_normal(out_shape)
    return lambda *xs: T.tsum(T.mul(fn(*xs), r))


def _away_from_integers(rng, shape, lo=-1.8, hi=1.8):
    base = rng.integers(int(np.floor(lo)), int(np.ceil(hi)), size=shape)
    return np.clip(base + rng.uniform(0.2, 0.8, size=shape), lo, hi)


def _spread(rng, shape, gap=0.05):
    """Values whose pairwise gaps are at least ``gap`` (for max/relu-style kinks)."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) - n / 2) * gap + rng.uniform(0.2, 0.4) * gap
    return vals.reshape(shape)


def _conv(rng):
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    f = _weighted(lambda x, w, b: T.conv2d(x, w, b, 1, 1), (2, 4, 7, 6), rng)
    return dict(f=f, inputs=[x, w, b], step=1e-3)


def _conv_dilated(rng):
    x = rng.standard_normal((2, 4, 9, 9))
    w = rng.standard_normal((2, 4, 3, 3))
    f = _weighted(lambda x, w: T.conv2d(x, w, None, 1, 3, 3), (2, 2, 9, 9), rng)
    return dict(f=f, inputs=[x, w], step=1e-3)


def _conv_grouped_strided(rng):
    x = rng.standard_normal((1, 4, 8, 8))
    w = rng.standard_normal((4, 2, 3, 3))
    f = _weighted(lambda x, w: T.conv2d(x, w, None, 2, 1, 1, groups=2), (1, 4, 4, 4), rng)
    return dict(f=f, inputs=[x, w], step=1e-3)


def _deform(dilation):
    def build(rng):
        x = rng.standard_normal((2, 3, 8, 8))
        off = _away_from_integers(rng, (2, 18, 8, 8))
        w = rng.standard_normal((2, 3, 3, 3))
        b = rng.standard_normal(2)
        f = _weighted(lambda x, o, w, b: deformable_conv2d(x, o, w, b, dilation), (2, 2, 8, 8), rng)
        return dict(f=f, inputs=[x, off, w, b], step=1e-6)

    return build


def _offset_branch(rng):
    x = rng.standard_normal((1, 2, 7, 7))
    # small weights keep the pre-activation inside (-1, 1)
    ow = 0.05 * rng.standard_normal((18, 2, 3, 3))
    w = rng.standard_normal((3, 2, 3, 3))

    def f(x, ow, w):
        return deformable_conv2d(x, compute_offsets(x, ow), w, None, 3)

    return dict(f=_weighted(f, (1, 3, 7, 7), rng), inputs=[x, ow, w], step=1e-6)


def _avg_pool(rng):
    x = rng.standard_normal((2, 3, 7, 7))
    return dict(f=_weighted(lambda x: T.avg_pool2d(x, 5, 1, 2), (2, 3, 7, 7), rng), inputs=[x], step=1e-3)


def _max_pool(rng):
    x = _spread(rng, (2, 3, 8, 8))
    return dict(f=_weighted(lambda x: T.max_pool2d(x, 2), (2, 3, 4, 4), rng), inputs=[x], step=1e-4)


def _global_pool(rng):
    x = rng.standard_normal((2, 3, 5, 6))
    return dict(f=_weighted(T.global_avg_pool, (2, 3, 1, 1), rng), inputs=[x], step=1e-3)


def _adaptive_pool(rng):
    x = rng.standard_normal((1, 2, 12, 10))
    return dict(f=_weighted(lambda x: T.adaptive_avg_pool2d(x, 4), (1, 2, 4, 4), rng), inputs=[x], step=1e-3)


def _bilinear(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    return dict(f=_weighted(lambda x: T.bilinear_upsample(x, 8, 10), (2, 3, 8, 10), rng), inputs=[x], step=1e-3)


def _upsample_module(mode):
    def build(rng):
        up = Upsample(3, mode, np.random.default_rng(int(rng.integers(1 << 30))))
        x = rng.standard_normal((2, 3, 4, 4))
        return dict(f=_weighted(up, (2, 3, 8, 8), rng), inputs=[x], params=up.parameters(), step=1e-3)

    return build


def _batch_norm(rng):
    bn = BatchNorm2d(3)
    bn.gamma.data[...] = rng.uniform(0.5, 1.5, 3)
    bn.beta.data[...] = rng.standard_normal(3)
    x = rng.standard_normal((3, 3, 4, 4))
    return dict(f=_weighted(bn, (3, 3, 4, 4), rng), inputs=[x], params=bn.parameters(), step=1e-5)


def _layer_norm(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    return dict(f=_weighted(T.layer_norm, (2, 3, 4, 4), rng), inputs=[x], step=1e-5)


def _act(fn, lo=-3.0, hi=3.0, kink=None):
    def build(rng):
        x = rng.uniform(lo, hi, (2, 3, 4, 4))
        if kink is not None:
            for k in kink:
                near = np.abs(x - k) < 0.05
                x[near] += 0.1
        return dict(f=_weighted(fn, x.shape, rng), inputs=[x], step=1e-5)

    return build


def _ce_log_dice(binary):
    def build(rng):
        k = 1 if binary else 3
        logits = rng.standard_normal((2, k, 5, 5))
        labels = rng.integers(0, 2 if binary else 3, (2, 5, 5))
        act = T.sigmoid if binary else T.softmax_channels
        return dict(f=lambda z: ce_log_dice(act(z), labels), inputs=[logits], step=1e-5)

    return build


def _pyramid(rng):
    logits = [rng.standard_normal((1, 3, 16 >> i, 16 >> i)) for i in range(4)]
    labels = rng.integers(0, 3, (1, 16, 16))
    cfg = LossConfig()

    def f(*zs):
        return pyramid_loss([T.softmax_channels(z) for z in zs], labels, cfg)

    return dict(f=f, inputs=logits, step=1e-5)


def _pvf(rng):
    mod = PyramidViewFusion(8, np.random.default_rng(int(rng.integers(1 << 30))))
    x = rng.standard_normal((2, 8, 8, 8))
    return dict(f=_weighted(mod, (2, 8, 8, 8), rng), inputs=[x], params=mod.parameters(), step=1e-5, max_coords=40)


def _dpr(rng):
    mod = DeformablePyramidReception(3, 3, 4, np.random.default_rng(int(rng.integers(1 << 30))))
    for blk in mod.deform:
        # nonzero offsets so that bilinear sampling is off the integer grid
        blk.offset_weight.data[...] = 0.03 * rng.standard_normal(blk.offset_weight.shape)
    enc = rng.standard_normal((2, 3, 8, 8))
    dec = rng.standard_normal((2, 3, 8, 8))
    return dict(
        f=_weighted(mod, (2, 4, 8, 8), rng), inputs=[enc, dec], params=mod.parameters(), step=1e-6, max_coords=30
    )


CASES: List[Case] = [
    Case("conv2d", "conv", _conv),
    Case("conv2d dilated", "conv", _conv_dilated),
    Case("conv2d grouped strided", "conv", _conv_grouped_strided),
    Case("deformable_conv2d d=1", "deform", _deform(1)),
    Case("deformable_conv2d d=3", "deform", _deform(3)),
    Case("deformable_conv2d d=6", "deform", _deform(6)),
    Case("offset conv + deformable", "deform", _offset_branch),
    Case("avg_pool2d", "pool", _avg_pool),
    Case("max_pool2d", "pool", _max_pool),
    Case("global_avg_pool", "pool", _global_pool),
    Case("adaptive_avg_pool2d", "pool", _adaptive_pool),
    Case("bilinear_upsample", "upsample", _bilinear),
    Case("upsample bilinear", "upsample", _upsample_module("bilinear")),
    Case("upsample transposed", "upsample", _upsample_module("transposed")),
    Case("upsample pixel_shuffle", "upsample", _upsample_module("pixel_shuffle")),
    Case("batch_norm", "norm", _batch_norm),
    Case("layer_norm", "norm", _layer_norm),
    Case("relu", "act", _act(T.relu, kink=(0.0,))),
    Case("hardtanh", "act", _act(T.hardtanh, kink=(-1.0, 1.0))),
    Case("sigmoid", "act", _act(T.sigmoid)),
    Case("softmax", "act", _act(T.softmax_channels)),
    Case("ce_log_dice multiclass", "loss", _ce_log_dice(False)),
    Case("ce_log_dice binary", "loss", _ce_log_dice(True)),
    Case("pyramid_loss", "loss", _pyramid),
    Case("pvf_forward", "pvf", _pvf),
    Case("dpr_forward", "dpr", _dpr),
]


def select(ops: str = "all") -> List[Case]:
    if ops == "all":
        return list(CASES)
    if ops not in GROUPS:
        raise ValueError(f"unknown op group {ops!r}; choose from all, {', '.join(GROUPS)}")
    return [c for c in CASES if c.group == ops]


def run_case(case: Case, seed: int) -> CaseResult:
    rng = np.random.default_rng([seed, sum(map(ord, case.name))])
    spec = case.build(rng)
    t0 = time.perf_counter()
    res = numeric_grad_check(
        spec["f"], spec["inputs"], step=spec.get("step", 1e-5), params=spec.get("params", ()),
        max_coords=spec.get("max_coords"), seed=seed, name=case.name,
    )
    return CaseResult(case.name, case.group, seed, res.max_rel_error, time.perf_counter() - t0)


def run(ops: str = "all", seeds: Sequence[int] = (0,)) -> List[CaseResult]:
    return [run_case(c, s) for c in select(ops) for s in seeds]


def summarize(results: Sequence[CaseResult]) -> Dict[str, CaseResult]:
    """Worst result per case name."""
    worst: Dict[str, CaseResult] = {}
    for r in results:
        if r.name not in worst or r.max_rel_error > worst[r.name].max_rel_error:
            worst[r.name] = r
    return worst
