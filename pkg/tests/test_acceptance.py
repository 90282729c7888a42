"""Acceptance criteria, one test each.

Run with ``pytest tests/test_acceptance.py -v``; a PASS/FAIL line per
criterion is printed in the terminal summary.  The desk-scale training
criteria take about an hour and a half on one CPU core.
"""

import math
import time

import numpy as np
import pytest

from deeppyram import suites
from deeppyram import tensor as T
from deeppyram.data import SynthSpec, synth_generate
from deeppyram.deform import deformable_conv2d
from deeppyram.losses import ce_log_dice, downsample_gt, one_hot, pyramid_loss, weighted_pyramid_sum
from deeppyram.metrics import dice, iou
from deeppyram.model import DeepPyram, ModelConfig, count_parameters
from deeppyram.tensor import Tensor, default_dtype
from deeppyram.train import LR_GRID, TrainConfig, ablation_rows, clip_gradients, evaluate, learning_rate, train

BASELINE = dict(enable_pvf=False, enable_dpr=False, enable_pl=False)

# Desk protocol.  The optimiser is not fixed by the method description; SGD
# with momentum (the library default) stays below 0.80 test IoU after 20
# epochs here, so the desk runs use Adam at the largest grid learning rate.
DESK_TRAIN = TrainConfig(initial_lr=0.001, epochs=20, optimizer="adam")
# Ablation arms use the same 20-epoch protocol.  Seed 0 is the desk pair.
ABLATION_SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def desk_data():
    spec = SynthSpec(height=64, width=64, num_classes=4)
    train_set = synth_generate(spec, 0, 200)
    test_set = synth_generate(spec, 1, 50)
    val_set = synth_generate(spec, 2, 25)
    return train_set, test_set, val_set


def timed_train(model_cfg, train_cfg, data):
    train_set, test_set, val_set = data
    t0 = time.perf_counter()
    res = train(model_cfg, train_cfg, train_set, val_set)
    seconds = time.perf_counter() - t0
    return res, evaluate(res.model, test_set).mean_iou, seconds


# ---------------------------------------------------------------------------------
def test_gradient_oracle_suite(criterion):
    """Gradient oracle suite (5 seeds, max rel err < 1e-3, < 5 min)"""
    t0 = time.perf_counter()
    worst = suites.summarize(suites.run("all", seeds=range(5)))
    seconds = time.perf_counter() - t0
    err = max(r.max_rel_error for r in worst.values())
    groups = {r.group for r in worst.values()}
    ok = err < 1e-3 and seconds < 300 and groups == set(suites.GROUPS)
    criterion(ok, f"{len(worst)} cases, worst {err:.2e}, {seconds:.0f}s")
    assert ok


def test_zero_offset_equivalence(criterion):
    """Zero-offset deformable conv equals dilated conv (dilations 3 and 6, 20 cases, 1e-6)"""
    rng = np.random.default_rng(2024)
    worst = 0.0
    for case in range(20):
        d = (3, 6)[case % 2]
        n, cin, cout = rng.integers(1, 3), rng.integers(1, 5), rng.integers(1, 5)
        h, w = rng.integers(4, 20, size=2)
        x = Tensor(rng.standard_normal((n, cin, h, w)))
        wt = Tensor(rng.standard_normal((cout, cin, 3, 3)))
        b = Tensor(rng.standard_normal(cout))
        got = deformable_conv2d(x, Tensor(np.zeros((n, 18, h, w))), wt, b, d).data
        want = T.conv2d(x, wt, b, 1, d, d).data
        worst = max(worst, float(np.abs(got - want).max()))
    ok = worst <= 1e-6
    criterion(ok, f"max abs diff {worst:.2e}")
    assert ok


def test_receptive_field_reach(criterion):
    """Receptive-field reach is exactly 7 at dilation 6 with saturated offsets"""
    size = 21
    c = size // 2
    reach = []
    for sign in (1.0, -1.0):
        x = Tensor(np.random.default_rng(7).standard_normal((1, 1, size, size)), requires_grad=True)
        y = deformable_conv2d(x, Tensor(np.full((1, 18, size, size), sign)), Tensor(np.ones((1, 1, 3, 3))), None, 6)
        T.narrow(T.narrow(y, 2, c, c + 1), 3, c, c + 1).sum().backward()
        rows, cols = np.nonzero(x.grad[0, 0])
        reach.append((int(np.abs(rows - c).max()), int(np.abs(cols - c).max())))
    ok = all(r == (7, 7) for r in reach)
    criterion(ok, f"reach per axis {reach}")
    assert ok


def test_loss_arithmetic(criterion):
    """Loss arithmetic: pyramid (1,1,1,1) = 2.5, perfect prediction = 0, stated 0.61193 case within 1e-4"""
    pyr = weighted_pyramid_sum([1.0, 1.0, 1.0, 1.0])
    with default_dtype(np.float64):
        ones = np.ones((1, 1, 2, 2))
        perfect = ce_log_dice(Tensor(ones), ones).item()
        labels = np.random.default_rng(0).integers(0, 4, (2, 16, 16))
        outs = [Tensor(one_hot(downsample_gt(labels, 2**i), 4, np.float64)) for i in range(4)]
        perfect_pyr = pyramid_loss(outs, labels).item()
        half = ce_log_dice(Tensor(np.full((1, 1, 2, 2), 0.5)), ones).item()
    checks = {
        "pyramid": pyr == 2.5,
        "perfect": perfect == 0.0 and perfect_pyr == 0.0,
        "0.61193": abs(half - 0.61193) <= 1e-4,
    }
    ok = all(checks.values())
    criterion(ok, f"pyramid {pyr}, perfect {perfect}, half-prob case {half:.6f} vs 0.61193 ({checks})")
    # the direct evaluation 0.8*ln 2 - 0.2*ln(5/7) is 0.621812; see the decisions ledger
    assert half == pytest.approx(0.8 * math.log(2) - 0.2 * math.log(5 / 7), abs=1e-12)
    assert ok


def test_metric_identity(criterion):
    """Dice = 2 IoU / (1 + IoU) on 1000 random mask pairs to 1e-12"""
    rng = np.random.default_rng(99)
    worst = 0.0
    for _ in range(1000):
        shape = tuple(rng.integers(1, 33, size=2))
        p_a, p_b = rng.random(2)
        a, b = rng.random(shape) < p_a, rng.random(shape) < p_b
        i = iou(a, b)
        worst = max(worst, abs(dice(a, b) - 2 * i / (1 + i)))
    ok = worst <= 1e-12
    criterion(ok, f"max deviation {worst:.1e}")
    assert ok


def test_schedule_and_clipping(criterion):
    """Schedule lr0 * 0.8^floor(e/2) exactly; post-clip |grad| <= 0.1"""
    closed = all(learning_rate(lr0, e) == lr0 * 0.8 ** (e // 2) for lr0 in LR_GRID for e in range(30))
    data = synth_generate(SynthSpec(), 5, 4)
    res = train(ModelConfig(widths=(4, 8, 8, 8, 8)), TrainConfig(epochs=5, batch_size=4), data, data)
    logged = [lr for _, lr, *_ in res.log.epochs] == [0.001 * 0.8 ** (e // 2) for e in range(5)]

    model = DeepPyram(ModelConfig(widths=(4, 8, 8, 8, 8)))
    images = np.stack([s.image for s in data])
    masks = np.stack([s.mask for s in data])
    loss = pyramid_loss(model(Tensor(images)), masks) * 1e4
    model.zero_grad()
    loss.backward()
    params = model.parameters()
    before = max(float(np.abs(p.grad).max()) for p in params)
    clip_gradients(params, 0.1)
    after = max(float(np.abs(p.grad).max()) for p in params)
    ok = closed and logged and after <= np.float32(0.1) and before > 0.1
    criterion(ok, f"closed form {closed}, trainer log {logged}, max |grad| {before:.3g} -> {after:.6g}")
    assert ok


@pytest.fixture(scope="module")
def desk_runs(desk_data):
    full = timed_train(ModelConfig(), DESK_TRAIN, desk_data)
    base = timed_train(ModelConfig(**BASELINE), DESK_TRAIN, desk_data)
    return full, base


def test_desk_scale_learning(desk_runs, criterion):
    """Desk learning: full model test IoU >= 0.80 in 20 epochs and <= 15 min; baseline >= 0.70"""
    (full, full_iou, seconds), (base, base_iou, base_seconds) = desk_runs
    ok = full_iou >= 0.80 and seconds <= 900 and base_iou >= 0.70 and len(full.log.epochs) <= 20
    criterion(
        ok,
        f"full IoU {full_iou:.4f} (best epoch {full.best_epoch + 1}, {seconds:.0f}s), "
        f"baseline IoU {base_iou:.4f} ({base_seconds:.0f}s)",
    )
    assert ok


def test_ablation_direction(desk_data, desk_runs, criterion):
    """Ablation over 3 seeds: mean IoU(full) >= mean IoU(baseline) - 0.01; parameter ordering"""
    rows = {r.name: r.params for r in ablation_rows(ModelConfig())}
    w, k = ModelConfig().widths, ModelConfig().num_classes
    ordering = (
        rows["baseline"] < rows["PVF"] < rows["PVF+DPR"]
        and rows["PVF+DPR+PL"] - rows["PVF+DPR"] == sum(w[s] * k + k for s in (1, 2, 3))
        and rows["baseline"] == count_parameters(ModelConfig(**BASELINE))
    )
    (_, full0, _), (_, base0, _) = desk_runs
    scores = {"full": [full0], "baseline": [base0]}
    for seed in ABLATION_SEEDS[1:]:
        cfg = TrainConfig(**{**DESK_TRAIN.to_dict(), "seed": seed})
        for name, extra in (("full", {}), ("baseline", BASELINE)):
            scores[name].append(timed_train(ModelConfig(**extra, seed=seed), cfg, desk_data)[1])
    full, base = np.mean(scores["full"]), np.mean(scores["baseline"])
    ok = ordering and full >= base - 0.01
    criterion(
        ok,
        f"mean IoU full {full:.4f} vs baseline {base:.4f} over seeds {ABLATION_SEEDS}; "
        f"params {rows['baseline']} < {rows['PVF']} < {rows['PVF+DPR']} (+PL {rows['PVF+DPR+PL']})",
    )
    assert ok


def test_determinism(criterion):
    """Identical seeds and configs give byte-identical checkpoints and logs"""
    data = synth_generate(SynthSpec(), 8, 12)
    cfg = TrainConfig(epochs=2, batch_size=4, seed=5)
    runs = [train(ModelConfig(seed=5), cfg, data[:8], data[8:]) for _ in range(2)]
    same_ckpt = runs[0].checkpoint == runs[1].checkpoint
    same_log = runs[0].log.to_csv().encode() == runs[1].log.to_csv().encode()
    other = train(ModelConfig(seed=6), TrainConfig(epochs=2, batch_size=4, seed=6), data[:8], data[8:])
    ok = same_ckpt and same_log and other.checkpoint != runs[0].checkpoint
    criterion(ok, f"checkpoint identical {same_ckpt}, log identical {same_log}, {len(runs[0].checkpoint)} bytes")
    assert ok
