import hashlib
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from deeppyram import checkpoint
from deeppyram.data import AugmentConfig, SynthSpec, synth_generate
from deeppyram.errors import ConfigError, DataError, NumericalError
from deeppyram.model import DeepPyram, ModelConfig, count_parameters
from deeppyram.nn import parameter
from deeppyram.train import (
    AblationTable,
    Optimizer,
    TrainConfig,
    TrainLog,
    ablate,
    ablation_rows,
    clip_gradients,
    evaluate,
    learning_rate,
    train,
)

TINY = ModelConfig(widths=(4, 8, 8, 8, 8))


@pytest.fixture(scope="module")
def tiny_data():
    spec = SynthSpec()
    return synth_generate(spec, 0, 8), synth_generate(spec, 0, 4, start=100)


# -- schedule, clipping, optimiser ----------------------------------------------
def test_lr_schedule_values():
    assert learning_rate(0.001, 4) == pytest.approx(0.00064, abs=1e-18)
    assert [learning_rate(1.0, e) for e in range(6)] == [1.0, 1.0, 0.8, 0.8, 0.8**2, 0.8**2]
    cfg = TrainConfig(initial_lr=0.0005)
    assert all(cfg.lr_at(e) == 0.0005 * 0.8 ** (e // 2) for e in range(30))


@pytest.mark.parametrize(
    "bad",
    [dict(initial_lr=0), dict(epochs=0), dict(grad_clip=-1), dict(optimizer="rmsprop"), dict(clip_mode="l1")],
)
def test_train_config_validation(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad)


def test_clip_examples():
    p = parameter(np.array([0.05, -3.2, 0.1, 7.0]))
    p.grad = p.data.copy()
    clip_gradients([p], 0.1)
    np.testing.assert_allclose(p.grad, [0.05, -0.1, 0.1, 0.1])


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float32, (5, 4), elements=st.floats(-1e6, 1e6, width=32)))
def test_clip_bounds_every_element(g):
    p = parameter(np.zeros((5, 4)))
    p.grad = g.copy()
    clip_gradients([p], 0.1)
    assert np.abs(p.grad).max() <= np.float32(0.1)
    inside = np.abs(g) <= np.float32(0.1)
    np.testing.assert_array_equal(p.grad[inside], g[inside])


def test_norm_clip_rescales_jointly():
    a, b = parameter(np.zeros(2)), parameter(np.zeros(1))
    a.grad, b.grad = np.array([3.0, 0.0], np.float32), np.array([4.0], np.float32)
    clip_gradients([a, b], 1.0, mode="norm")
    np.testing.assert_allclose(np.concatenate([a.grad, b.grad]), [0.6, 0.0, 0.8], rtol=1e-6)


def test_sgd_momentum_steps():
    p = parameter(np.array([1.0]))
    opt = Optimizer([p], TrainConfig(momentum=0.9))
    for _ in range(2):
        p.grad = np.array([1.0], np.float32)
        opt.step(0.1)
    # v1 = 1, v2 = 1.9
    assert p.data[0] == pytest.approx(1.0 - 0.1 - 0.19, rel=1e-6)


def test_adam_first_step_is_lr_sized():
    p = parameter(np.array([1.0, -1.0]))
    opt = Optimizer([p], TrainConfig(optimizer="adam"))
    p.grad = np.array([0.3, -5.0], np.float32)
    opt.step(0.01)
    np.testing.assert_allclose(p.data, [0.99, -0.99], rtol=1e-5)


# -- training loop ---------------------------------------------------------------
def test_memorises_one_repeated_sample():
    sample = synth_generate(SynthSpec(), 0, 1)
    res = train(
        ModelConfig(), TrainConfig(epochs=1, batch_size=1), sample * 50, sample, aug_cfg=AugmentConfig.disabled()
    )
    losses = [s[3] for s in res.log.steps]
    assert len(losses) == 50
    assert losses[-1] <= 0.5 * losses[0]


def test_training_is_reproducible(tiny_data):
    train_set, val_set = tiny_data
    cfg = TrainConfig(epochs=2, batch_size=4, seed=3)
    a = train(TINY, cfg, train_set, val_set)
    b = train(TINY, cfg, train_set, val_set)
    assert a.checkpoint == b.checkpoint
    assert a.log.to_csv() == b.log.to_csv()
    c = train(TINY, TrainConfig(epochs=2, batch_size=4, seed=4), train_set, val_set)
    assert c.log.to_csv() != a.log.to_csv()


def test_training_leaves_data_untouched(tiny_data):
    train_set, val_set = tiny_data
    digest = hashlib.sha256(b"".join(s.image.tobytes() + s.mask.tobytes() for s in train_set)).hexdigest()
    train(TINY, TrainConfig(epochs=1), train_set, val_set)
    assert digest == hashlib.sha256(b"".join(s.image.tobytes() + s.mask.tobytes() for s in train_set)).hexdigest()


def test_log_schedule_and_best_checkpoint(tiny_data):
    train_set, val_set = tiny_data
    res = train(TINY, TrainConfig(epochs=3, initial_lr=0.002), train_set, val_set)
    assert [e[1] for e in res.log.epochs] == [0.002, 0.002, 0.002 * 0.8]
    assert res.best_iou == max(e[3] for e in res.log.epochs)
    assert evaluate(res.model, val_set).mean_iou == pytest.approx(res.best_iou, abs=1e-9)
    parsed = TrainLog.from_csv(res.log.to_csv())
    assert len(parsed.steps) == 6 and len(parsed.epochs) == 3


def test_non_finite_loss_aborts(tiny_data):
    train_set, _ = tiny_data
    bad = [type(s)(s.image.copy(), s.mask, s.ident) for s in train_set]
    bad[0].image[0, 0, 0] = np.nan
    with pytest.raises(NumericalError, match="step"):
        train(TINY, TrainConfig(epochs=1, batch_size=8), bad, None, aug_cfg=AugmentConfig.disabled())


def test_evaluate_is_partition_independent(tiny_data):
    train_set, _ = tiny_data
    model = DeepPyram(TINY)
    a = evaluate(model, train_set, batch_size=1).to_dict()
    b = evaluate(model, train_set, batch_size=8).to_dict()
    assert len(a["per_image"]) == len(b["per_image"]) == len(train_set)
    for x, y in zip(a["per_image"], b["per_image"]):
        assert x["id"] == y["id"] and x["iou"] == pytest.approx(y["iou"]) and x["dice"] == pytest.approx(y["dice"])


# -- checkpoints -----------------------------------------------------------------
def parse_checkpoint(buf):
    """Reader written from the documented layout only."""
    assert buf[:4] == b"DPYR"
    version, hlen = struct.unpack_from("<II", buf, 4)
    pos = 12 + hlen
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        name = buf[pos + 4 : pos + 4 + nlen].decode()
        pos += 4 + nlen
        dims = struct.unpack_from("<4I", buf, pos)
        pos += 16
        size = int(np.prod(dims))
        out[name] = np.frombuffer(buf, "<f4", size, pos).reshape(dims)
        pos += 4 * size
    assert pos == len(buf)
    return version, out


def test_checkpoint_layout_and_roundtrip(tmp_path):
    model = DeepPyram(TINY.replace(seed=5))
    checkpoint.save(model, tmp_path / "m.ckpt", {"note": "x"})
    buf = (tmp_path / "m.ckpt").read_bytes()
    version, tensors = parse_checkpoint(buf)
    assert version == 1
    state = model.state_dict()
    assert list(tensors) == list(state)
    for k, v in state.items():
        np.testing.assert_array_equal(tensors[k].reshape(v.shape), v)
        assert tensors[k].shape == (1,) * (4 - v.ndim) + v.shape
    loaded, meta = checkpoint.load(tmp_path / "m.ckpt")
    assert meta == {"note": "x"} and loaded.config == model.config
    assert checkpoint.to_bytes(loaded, meta) == buf


@pytest.mark.parametrize("mutate", [lambda b: b"XXXX" + b[4:], lambda b: b[:-3], lambda b: b + b"\0"])
def test_corrupt_checkpoint(mutate):
    buf = checkpoint.to_bytes(DeepPyram(TINY))
    with pytest.raises(DataError):
        checkpoint.from_bytes(mutate(buf))


# -- ablation --------------------------------------------------------------------
def test_ablation_row_layout():
    rows = ablation_rows(ModelConfig())
    assert [r.group for r in rows] == ["modules"] * 5 + ["alternatives"] * 2 + ["upsampling"] * 3
    mods = {r.name: r for r in rows[:5]}
    assert mods["baseline"].params < mods["PVF"].params < mods["PVF+DPR"].params
    k, w = 4, ModelConfig().widths
    assert mods["PVF+DPR+PL"].params - mods["PVF+DPR"].params == sum(w[s] * k + k for s in (1, 2, 3))
    assert rows[5].config.decoder_alternative == "aspp_plus" and rows[6].config.decoder_alternative == "ppm"
    assert [r.config.upsample_mode for r in rows[7:]] == ["bilinear", "transposed", "pixel_shuffle"]
    assert all(r.params == count_parameters(r.config) for r in rows)


def test_ablate_produces_full_table(tiny_data):
    train_set, test_set = tiny_data
    table = ablate(TINY, TrainConfig(epochs=1, batch_size=8), train_set, test_set, seeds=[0])
    assert isinstance(table, AblationTable)
    lines = table.to_csv().strip().splitlines()
    assert len(lines) == 1 + 10
    assert lines[1].startswith("modules,baseline,,,,none,bilinear,")
    text = table.to_text()
    assert "PVF+DPR+PL" in text and "upsample pixel_shuffle" in text
    # identical configurations are trained once and reported identically
    assert table.row("PVF+DPR+PL").iou == table.row("upsample bilinear").iou
