import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deeppyram import tensor as T
from deeppyram.deform import DeformableConvSpec, compute_offsets, deformable_block, deformable_conv2d, tap_offsets
from deeppyram.errors import DimensionError
from deeppyram.tensor import Tensor


def bilinear_read(img, y, x):
    """Sample a 2-D array at a real position; zero outside."""
    h, w = img.shape
    y0, x0 = int(np.floor(y)), int(np.floor(x))
    fy, fx = y - y0, x - x0
    total = 0.0
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            yy, xx = y0 + dy, x0 + dx
            if 0 <= yy < h and 0 <= xx < w:
                total += wy * wx * img[yy, xx]
    return total


def brute_deform(x, off, w, b, dilation):
    n, c, h, wd = x.shape
    cout, _, kh, kw = w.shape
    out = np.zeros((n, cout, h, wd))
    for bi in range(n):
        for i in range(h):
            for j in range(wd):
                for t in range(kh * kw):
                    ty, tx = divmod(t, kw)
                    py = i + (ty - kh // 2) * dilation + off[bi, 2 * t, i, j]
                    px = j + (tx - kw // 2) * dilation + off[bi, 2 * t + 1, i, j]
                    vals = np.array([bilinear_read(x[bi, ci], py, px) for ci in range(c)])
                    out[bi, :, i, j] += w[:, :, ty, tx] @ vals
    return out + b.reshape(1, -1, 1, 1)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), dilation=st.sampled_from([1, 2, 3, 6]), scale=st.sampled_from([0.3, 1.0, 2.5]))
def test_matches_brute_force_sampling(seed, dilation, scale):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 2, 6, 5))
    off = rng.uniform(-scale, scale, (1, 18, 6, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    got = deformable_conv2d(Tensor(x), Tensor(off), Tensor(w), Tensor(b), dilation).data
    np.testing.assert_allclose(got, brute_deform(x, off, w, b, dilation), atol=1e-10)


@pytest.mark.parametrize("dilation", [1, 3, 6])
def test_zero_offsets_equal_dilated_conv(dilation, rng):
    x = rng.standard_normal((2, 3, 9, 10))
    w = rng.standard_normal((4, 3, 3, 3))
    got = deformable_conv2d(Tensor(x), Tensor(np.zeros((2, 18, 9, 10))), Tensor(w), None, dilation).data
    want = T.conv2d(Tensor(x), Tensor(w), None, 1, dilation, dilation).data
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_integer_offsets_shift_the_tap(rng):
    """A uniform offset of (+1, -2) on every tap equals convolving a shifted image."""
    x = rng.standard_normal((1, 1, 12, 12))
    w = rng.standard_normal((1, 1, 3, 3))
    off = np.zeros((1, 18, 12, 12))
    off[:, 0::2] = 1.0
    off[:, 1::2] = -2.0
    got = deformable_conv2d(Tensor(x), Tensor(off), Tensor(w), None, 1).data
    shifted = np.zeros_like(x)
    shifted[..., :-1, 2:] = x[..., 1:, :-2]
    want = T.conv2d(Tensor(shifted), Tensor(w), None, 1, 1, 1).data
    # the shifted copy drops pixels that move into its zero border, so compare the interior
    np.testing.assert_allclose(got[..., 1:-1, 1:-1], want[..., 1:-1, 1:-1], atol=1e-12)


def test_tap_order_is_row_major():
    np.testing.assert_array_equal(tap_offsets(3, 3, 2)[:4], [[-2, -2], [-2, 0], [-2, 2], [0, -2]])


def test_offsets_are_clipped_to_unit_range(rng):
    x = Tensor(rng.standard_normal((1, 2, 5, 5)) * 100)
    off = compute_offsets(x, Tensor(rng.standard_normal((18, 2, 3, 3))))
    assert np.abs(off.data).max() <= 1.0
    assert off.shape == (1, 18, 5, 5)


@pytest.mark.parametrize("dilation", [3, 6])
def test_receptive_field_reach_with_saturated_offsets(dilation):
    """All offsets pinned at +1 or -1 stretch the reach to dilation + 1 exactly."""
    h = w = 2 * (dilation + 3) + 1
    c = h // 2
    for sign in (1.0, -1.0):
        x = Tensor(np.random.default_rng(0).standard_normal((1, 1, h, w)), requires_grad=True)
        off = Tensor(np.full((1, 18, h, w), sign))
        y = deformable_conv2d(x, off, Tensor(np.ones((1, 1, 3, 3))), None, dilation)
        T.narrow(T.narrow(y, 2, c, c + 1), 3, c, c + 1).sum().backward()
        rows, cols = np.nonzero(x.grad[0, 0])
        assert max(np.abs(rows - c).max(), np.abs(cols - c).max()) == dilation + 1


def test_shape_validation():
    x = Tensor(np.zeros((1, 2, 4, 4)))
    with pytest.raises(DimensionError):
        deformable_conv2d(x, Tensor(np.zeros((1, 17, 4, 4))), Tensor(np.zeros((1, 2, 3, 3))))
    with pytest.raises(DimensionError):
        deformable_conv2d(x, Tensor(np.zeros((1, 18, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_block_starts_as_dilated_conv(rng):
    x = rng.standard_normal((1, 2, 8, 8))
    w = rng.standard_normal((2, 2, 3, 3))
    spec = DeformableConvSpec(Tensor(w), Tensor(np.zeros((18, 2, 3, 3))), 3)
    got = deformable_block(Tensor(x), spec).data
    np.testing.assert_allclose(got, T.conv2d(Tensor(x), Tensor(w), None, 1, 3, 3).data, atol=1e-12)
