"""Differentiable primitives used by the segmentation model."""

from __future__ import annotations

from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigError, DimensionError
from .conv import conv2d, transposed_conv2d  # noqa: F401  (re-exported)
from .tensor import Tensor, make_result

EPS = 1e-5


def _require_4d(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{op} expects an (N, C, H, W) tensor, got shape {x.shape}")


# -- activations -------------------------------------------------------------
def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,))


def hardtanh(x: Tensor) -> Tensor:
    """Clip to [-1, 1]; subgradient 1 on the closed interval, 0 outside."""
    xd = x.data
    inside = np.abs(xd) <= 1.0
    return make_result(np.clip(xd, -1.0, 1.0), (x,), lambda g: (g * inside,))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make_result(y, (x,), lambda g: (g * y * (1.0 - y),))


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over axis 1."""
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return make_result(y, (x,), backward)


# -- structural ----------------------------------------------------------------
def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    xs = list(xs)
    if not xs:
        raise DimensionError("concat_channels needs at least one tensor")
    ref = xs[0].shape
    for t in xs:
        if t.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise DimensionError(f"cannot concatenate {t.shape} with {ref} along channels")
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])
    out = np.concatenate([t.data for t in xs], axis=1)

    def backward(g):
        return [g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs))]

    return make_result(out, xs, backward)


def pixel_shuffle(x: Tensor, factor: int) -> Tensor:
    """Rearrange ``(N, C*r*r, H, W)`` into ``(N, C, H*r, W*r)``."""
    _require_4d(x, "pixel_shuffle")
    n, c, h, w = x.shape
    r = factor
    if c % (r * r):
        raise ConfigError(f"pixel_shuffle needs channels divisible by {r * r}, got {c}")
    oc = c // (r * r)
    out = x.data.reshape(n, oc, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, oc, h * r, w * r)

    def backward(g):
        return (g.reshape(n, oc, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c, h, w),)

    return make_result(np.ascontiguousarray(out), (x,), backward)


# -- separable linear resampling ------------------------------------------------
@lru_cache(maxsize=256)
def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-D interpolation matrix with half-pixel centres (align_corners off)."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        f = src - i0
        m[i, i0] += 1.0 - f
        m[i, i1] += f
    m.setflags(write=False)
    return m


@lru_cache(maxsize=256)
def adaptive_pool_matrix(n_in: int, bins: int) -> np.ndarray:
    """1-D averaging matrix for ``bins`` sub-regions (floor/ceil boundaries)."""
    m = np.zeros((bins, n_in))
    for i in range(bins):
        lo = (i * n_in) // bins
        hi = -((-(i + 1) * n_in) // bins)
        m[i, lo:hi] = 1.0 / (hi - lo)
    m.setflags(write=False)
    return m


def separable_linear(x: Tensor, mh: np.ndarray, mw: np.ndarray) -> Tensor:
    """Apply ``mh @ x @ mw.T`` to every (n, c) plane."""
    _require_4d(x, "separable_linear")
    if mh.shape[1] != x.shape[2] or mw.shape[1] != x.shape[3]:
        raise DimensionError(f"resampling matrices {mh.shape}, {mw.shape} do not fit {x.shape}")
    mh = mh.astype(x.dtype)
    mw = mw.astype(x.dtype)
    out = np.matmul(np.matmul(mh, x.data), mw.T)

    def backward(g):
        return (np.matmul(np.matmul(mh.T, g), mw),)

    return make_result(out, (x,), backward)


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    _require_4d(x, "bilinear_upsample")
    return separable_linear(x, bilinear_matrix(x.shape[2], out_h), bilinear_matrix(x.shape[3], out_w))


def adaptive_avg_pool2d(x: Tensor, bins: int) -> Tensor:
    _require_4d(x, "adaptive_avg_pool2d")
    return separable_linear(x, adaptive_pool_matrix(x.shape[2], bins), adaptive_pool_matrix(x.shape[3], bins))


def global_avg_pool(x: Tensor) -> Tensor:
    _require_4d(x, "global_avg_pool")
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise DimensionError("global_avg_pool needs a non-empty spatial extent")
    out = x.data.mean(axis=(2, 3), keepdims=True)
    scale = 1.0 / (h * w)
    return make_result(out, (x,), lambda g: (np.broadcast_to(g * scale, x.shape),))


# -- pooling ---------------------------------------------------------------------
def _window_sum(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    out = np.zeros(xp.shape[:2] + (ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            out += xp[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride]
    return out


def avg_pool2d(x: Tensor, kernel: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Average pooling whose divisor counts only non-padded elements."""
    _require_4d(x, "avg_pool2d")
    n, c, h, w = x.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if kernel > hp or kernel > wp:
        raise DimensionError(f"kernel {kernel} larger than padded input {hp}x{wp}")
    ho = (hp - kernel) // stride + 1
    wo = (wp - kernel) // stride + 1
    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pad)
    ones = np.pad(np.ones((1, 1, h, w), dtype=x.dtype), pad)
    count = _window_sum(ones, kernel, stride, ho, wo)
    out = _window_sum(xp, kernel, stride, ho, wo) / count

    def backward(g):
        gs = g / count
        dxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
        for i in range(kernel):
            for j in range(kernel):
                dxp[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += gs
        return (dxp[:, :, padding : padding + h, padding : padding + w],)

    return make_result(out, (x,), backward)


def max_pool2d(x: Tensor, kernel: int = 2, stride: Optional[int] = None) -> Tensor:
    """Max pooling; ties route the gradient to the first element in row-major order."""
    _require_4d(x, "max_pool2d")
    stride = kernel if stride is None else stride
    n, c, h, w = x.shape
    if kernel > h or kernel > w:
        raise DimensionError(f"kernel {kernel} larger than input {h}x{w}")
    ho = (h - kernel) // stride + 1
    wo = (w - kernel) // stride + 1
    win = sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        ki, kj = np.divmod(arg, kernel)
        rows = np.arange(ho).reshape(1, 1, ho, 1) * stride + ki
        cols = np.arange(wo).reshape(1, 1, 1, wo) * stride + kj
        plane = (np.arange(n * c).reshape(n, c, 1, 1)) * (h * w)
        idx = (plane + rows * w + cols).ravel()
        dx = np.bincount(idx, weights=g.ravel(), minlength=n * c * h * w)
        return (dx.reshape(n, c, h, w).astype(g.dtype, copy=False),)

    return make_result(np.ascontiguousarray(out), (x,), backward)


# -- normalization -------------------------------------------------------------------
def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = EPS,
) -> Tensor:
    """Per-channel normalization; updates the running buffers in place when training."""
    _require_4d(x, "batch_norm")
    n, c, h, w = x.shape
    xd = x.data
    if training:
        m = n * h * w
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean.astype(xd.dtype), running_var.astype(xd.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    out = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        gx = g * gamma.data.reshape(1, c, 1, 1)
        if training:
            dx = inv.reshape(1, c, 1, 1) * (
                gx - gx.mean(axis=(0, 2, 3), keepdims=True) - xhat * (gx * xhat).mean(axis=(0, 2, 3), keepdims=True)
            )
        else:
            dx = gx * inv.reshape(1, c, 1, 1)
        return dx, dgamma, dbeta

    return make_result(out.astype(xd.dtype, copy=False), (x, gamma, beta), backward)


def layer_norm(x: Tensor, eps: float = EPS) -> Tensor:
    """Normalize each sample over (C, H, W); no affine parameters."""
    _require_4d(x, "layer_norm")
    xd = x.data
    axes = (1, 2, 3)
    mu = xd.mean(axis=axes, keepdims=True)
    var = xd.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv

    def backward(g):
        return (inv * (g - g.mean(axis=axes, keepdims=True) - xhat * (g * xhat).mean(axis=axes, keepdims=True)),)

    return make_result(xhat, (x,), backward)
