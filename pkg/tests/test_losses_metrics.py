import csv
import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from deeppyram import tensor as T
from deeppyram.errors import ConfigError, DimensionError, DomainError
from deeppyram.losses import LossConfig, ce_log_dice, downsample_gt, one_hot, pyramid_loss, weighted_pyramid_sum
from deeppyram.metrics import MetricReport, aggregate, binarize, dice, image_scores, iou, score_batch
from deeppyram.tensor import Tensor, numeric_grad_check


def loop_loss(p, t, lam=0.8, smooth=1.0, eps=1e-7):
    """Per-channel loop over pixels in float64."""
    per = []
    for k in range(p.shape[1]):
        pk, tk = p[:, k].ravel(), t[:, k].ravel()
        bce = 0.0
        for a, b in zip(pk, tk):
            bce -= b * math.log(max(a, eps)) + (1 - b) * math.log(max(1 - a, eps))
        bce /= pk.size
        d = (2 * float(np.dot(pk, tk)) + smooth) / (pk.sum() + tk.sum() + smooth)
        per.append(lam * bce - (1 - lam) * math.log(d))
    return sum(per) / len(per)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 4), lam=st.floats(0, 1))
def test_ce_log_dice_matches_loop_reference(seed, k, lam):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0, 1, (2, k, 4, 3))
    t = (rng.random((2, k, 4, 3)) < 0.4).astype(float)
    got = ce_log_dice(Tensor(p), t, LossConfig(lam=lam)).item()
    assert got == pytest.approx(loop_loss(p, t, lam), rel=1e-10, abs=1e-12)


def test_perfect_prediction_is_zero():
    labels = np.random.default_rng(0).integers(0, 3, (2, 8, 8))
    p = one_hot(labels, 3, np.float64)
    assert ce_log_dice(Tensor(p), labels).item() == 0.0


def test_empty_target_empty_prediction_is_zero():
    assert ce_log_dice(Tensor(np.zeros((1, 1, 4, 4))), np.zeros((1, 1, 4, 4))).item() == 0.0


def test_half_probability_on_all_ones_target():
    # BCE = ln 2, soft dice = (2*2 + 1) / (2 + 4 + 1) = 5/7
    got = ce_log_dice(Tensor(np.full((1, 1, 2, 2), 0.5)), np.ones((1, 1, 2, 2))).item()
    assert got == pytest.approx(0.8 * math.log(2) - 0.2 * math.log(5 / 7), abs=1e-12)


def test_clamp_keeps_loss_finite_for_confident_mistakes():
    loss = ce_log_dice(Tensor(np.zeros((1, 1, 2, 2))), np.ones((1, 1, 2, 2))).item()
    assert np.isfinite(loss)
    assert loss == pytest.approx(0.8 * -math.log(1e-7) - 0.2 * math.log(1 / 5), rel=1e-6)


def test_integer_labels_equal_one_hot_targets(rng):
    p = T.softmax_channels(Tensor(rng.standard_normal((2, 3, 4, 4))))
    labels = rng.integers(0, 3, (2, 4, 4))
    assert ce_log_dice(p, labels).item() == ce_log_dice(p, one_hot(labels, 3)).item()


def test_binary_mode_single_channel(rng):
    p = Tensor(rng.uniform(0.1, 0.9, (2, 1, 4, 4)))
    labels = rng.integers(0, 2, (2, 4, 4))
    assert ce_log_dice(p, labels).item() == pytest.approx(loop_loss(p.data, labels[:, None].astype(float)))


def test_loss_gradient(f64, rng):
    labels = rng.integers(0, 3, (1, 4, 4))
    res = numeric_grad_check(lambda z: ce_log_dice(T.softmax_channels(z), labels), [rng.standard_normal((1, 3, 4, 4))])
    assert res.passed


def test_loss_domain_and_shape_errors():
    with pytest.raises(DomainError):
        ce_log_dice(Tensor(np.full((1, 1, 2, 2), 1.5)), np.ones((1, 1, 2, 2)))
    with pytest.raises(DimensionError):
        ce_log_dice(Tensor(np.full((1, 2, 2, 2), 0.5)), np.ones((1, 3, 2, 2)))


@pytest.mark.parametrize("bad", [dict(lam=1.5), dict(smooth=0), dict(pl_weights=(1, 2, 3)), dict(pl_weights=(0.5,))])
def test_loss_config_validation(bad):
    with pytest.raises(ConfigError):
        LossConfig(**bad)


def test_pyramid_weights():
    assert weighted_pyramid_sum([1.0, 1.0, 1.0, 1.0]) == 2.5
    assert weighted_pyramid_sum([2.0, 4.0, 8.0, 16.0]) == 2 + 3 + 4 + 4
    assert weighted_pyramid_sum([0.7]) == 0.7
    with pytest.raises(DimensionError):
        weighted_pyramid_sum([1.0, 1.0])


def test_pyramid_loss_uses_downscaled_truth(rng):
    gt = rng.integers(0, 3, (1, 16, 16))
    outs = [Tensor(one_hot(downsample_gt(gt, 2**i), 3, np.float64)) for i in range(4)]
    assert pyramid_loss(outs, gt).item() == 0.0


def test_downsample_nearest_and_maxpool():
    m = np.array([[0, 1, 2, 0], [3, 0, 0, 0], [0, 0, 1, 1], [0, 0, 1, 0]])
    np.testing.assert_array_equal(downsample_gt(m, 2, "nearest"), [[0, 2], [0, 1]])
    np.testing.assert_array_equal(downsample_gt(m > 0, 2, "maxpool"), [[True, True], [False, True]])
    with pytest.raises(DimensionError):
        downsample_gt(np.zeros((5, 4)), 2)
    with pytest.raises(ConfigError):
        downsample_gt(m, 2, "bicubic")


# -- metrics ---------------------------------------------------------------------
masks = hnp.arrays(np.bool_, (6, 7))


@settings(max_examples=200, deadline=None)
@given(masks, masks)
def test_dice_iou_identity(a, b):
    i = iou(a, b)
    assert dice(a, b) == pytest.approx(2 * i / (1 + i), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(masks, masks)
def test_metric_symmetry_and_bounds(a, b):
    assert iou(a, b) == iou(b, a)
    assert 0.0 <= iou(a, b) <= dice(a, b) <= 1.0


def test_both_empty_scores_one():
    z = np.zeros((3, 3), bool)
    assert iou(z, z) == 1.0 and dice(z, z) == 1.0
    assert iou(z, ~z) == 0.0


def test_image_scores_average_present_classes():
    t = np.array([[1, 1], [0, 0]])
    p = np.array([[1, 0], [0, 0]])
    mean_iou, mean_dice, per_iou, _ = image_scores(p, t, 4)
    assert mean_iou == 0.5  # only class 1 is present in either mask
    assert per_iou[2] == 1.0 and per_iou[3] == 1.0
    assert mean_dice == pytest.approx(2 / 3)


def test_binarize_argmax_and_threshold():
    probs = np.array([[[[0.2]], [[0.7]], [[0.1]]]])
    assert binarize(probs)[0, 0, 0] == 1
    assert binarize(np.array([[[[0.4, 0.6]]]]))[0].tolist() == [[0, 1]]


def test_report_formats(rng):
    r = MetricReport()
    for i in range(4):
        r.add(f"im{i}", 0.5 + 0.1 * i, 0.6 + 0.1 * i, {1: 0.5}, {1: 0.6})
    rows = list(csv.reader(io.StringIO(r.to_csv())))
    assert rows[0] == ["id", "iou", "dice"]
    assert [row[0] for row in rows[-4:]] == ["mean", "std", "min", "max"]
    assert float(rows[-4][1]) == pytest.approx(0.65)
    data = json.loads(r.to_json())
    assert data["images"] == 4 and data["iou"]["max"] == pytest.approx(0.8)
    assert "IoU   mean 0.6500" in r.to_text()


def test_aggregate_is_partition_independent(rng):
    probs = rng.random((6, 3, 5, 5))
    labels = rng.integers(0, 3, (6, 5, 5))
    ids = [str(i) for i in range(6)]
    whole = score_batch(probs, labels, ids)
    parts = aggregate([score_batch(probs[:2], labels[:2], ids[:2]), score_batch(probs[2:], labels[2:], ids[2:])])
    assert whole.to_dict() == parts.to_dict()


def test_score_batch_binary():
    probs = np.array([[[[0.9, 0.1], [0.8, 0.2]]]])
    labels = np.array([[[1, 0], [0, 0]]])
    rep = score_batch(probs, labels, ["a"])
    assert rep.iou == [0.5] and rep.dice == [pytest.approx(2 / 3)]
