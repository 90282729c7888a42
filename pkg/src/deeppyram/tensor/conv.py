"""Convolution kernels: im2col gather plus one matrix multiply per group.

``conv2d_direct`` is a slow loop-over-taps reference kept for testing.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigError, DimensionError
from .tensor import Tensor, make_result


def conv_output_size(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _check(x: np.ndarray, w: np.ndarray, groups: int, padding: int, stride: int, dilation: int):
    if x.ndim != 4:
        raise DimensionError(f"conv2d expects a 4-D input, got shape {x.shape}")
    if w.ndim != 4:
        raise DimensionError(f"conv2d expects a 4-D weight, got shape {w.shape}")
    if groups < 1 or x.shape[1] % groups or w.shape[0] % groups:
        raise ConfigError(f"groups={groups} must divide in ({x.shape[1]}) and out ({w.shape[0]}) channels")
    if w.shape[1] * groups != x.shape[1]:
        raise DimensionError(
            f"weight expects {w.shape[1] * groups} input channels, input has {x.shape[1]}"
        )
    if padding < 0 or stride < 1 or dilation < 1:
        raise ConfigError("padding must be >= 0, stride and dilation >= 1")


def im2col(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    """Gather a padded ``(N, C, Hp, Wp)`` map into ``(C*kh*kw, N*ho*wo)`` columns."""
    n, c = xp.shape[:2]
    ekh, ekw = dilation * (kh - 1) + 1, dilation * (kw - 1) + 1
    win = sliding_window_view(xp, (ekh, ekw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride, ::dilation, ::dilation]
    # (N, C, ho, wo, kh, kw) -> (C, kh, kw, N, ho, wo)
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw, n * ho * wo)


def col2im(cols: np.ndarray, shape: tuple, kh: int, kw: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back into a padded map."""
    n, c, hp, wp = shape
    out = np.zeros((c, n, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    for i in range(kh):
        r0 = i * dilation
        for j in range(kw):
            c0 = j * dilation
            out[:, :, r0 : r0 + (ho - 1) * stride + 1 : stride, c0 : c0 + (wo - 1) * stride + 1 : stride] += cols[:, i, j]
    return out.transpose(1, 0, 2, 3)


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation on ``(N, C, H, W)`` maps with weight ``(Cout, Cin/groups, Kh, Kw)``."""
    xd, wd = x.data, w.data
    _check(xd, wd, groups, padding, stride, dilation)
    n, cin, h, wdt = xd.shape
    cout, cg, kh, kw = wd.shape
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(wdt, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise DimensionError(f"kernel {kh}x{kw} (dilation {dilation}) exceeds padded input {h}x{wdt}")

    dtype = np.result_type(xd, wd)
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    xp = _pad(xd, padding)
    og = cout // groups
    wms = [wd[gi * og : (gi + 1) * og].reshape(og, -1).astype(dtype, copy=False) for gi in range(groups)]
    cols, outs = [], []
    for gi in range(groups):
        xg = xp[:, gi * cg : (gi + 1) * cg]
        if pointwise:
            col = np.ascontiguousarray(xg.transpose(1, 0, 2, 3)).reshape(cg, n * ho * wo)
        else:
            col = im2col(xg, kh, kw, stride, dilation, ho, wo)
        cols.append(col)
        outs.append(wms[gi] @ col)
    out = outs[0] if groups == 1 else np.concatenate(outs, axis=0)
    out = np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))
    if b is not None:
        out += b.data.reshape(1, cout, 1, 1)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, n * ho * wo)
        dx = np.zeros(xp.shape, dtype=dtype) if groups > 1 else None
        dws = []
        for gi in range(groups):
            gg = g2[gi * og : (gi + 1) * og]
            dws.append(gg @ cols[gi].T)
            dcol = wms[gi].T @ gg
            if pointwise:
                dxg = dcol.reshape(cg, n, h, wdt).transpose(1, 0, 2, 3)
            else:
                dxg = col2im(dcol, (n, cg) + xp.shape[2:], kh, kw, stride, dilation, ho, wo)
            if groups == 1:
                dx = dxg
            else:
                dx[:, gi * cg : (gi + 1) * cg] = dxg
        if padding:
            dx = dx[:, :, padding:-padding, padding:-padding]
        dw = np.concatenate(dws, axis=0).reshape(wd.shape)
        db = g.sum(axis=(0, 2, 3)) if b is not None else None
        return np.ascontiguousarray(dx), dw, db

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out, parents, backward)


def conv2d_direct(x: np.ndarray, w: np.ndarray, b=None, stride=1, padding=0, dilation=1, groups=1) -> np.ndarray:
    """Reference convolution: explicit loops over output pixels and taps."""
    _check(x, w, groups, padding, stride, dilation)
    n, cin, h, wdt = x.shape
    cout, cg, kh, kw = w.shape
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(wdt, kw, stride, padding, dilation)
    xp = _pad(x.astype(np.float64), padding)
    og = cout // groups
    out = np.zeros((n, cout, ho, wo))
    for o in range(cout):
        gi = o // og
        xs = xp[:, gi * cg : (gi + 1) * cg]
        for i in range(ho):
            for j in range(wo):
                acc = np.zeros(n)
                for p in range(kh):
                    for q in range(kw):
                        v = xs[:, :, i * stride + p * dilation, j * stride + q * dilation]
                        acc += v @ w[o, :, p, q]
                out[:, o, i, j] = acc
        if b is not None:
            out[:, o] += b[o]
    return out


def transposed_conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 2) -> Tensor:
    """Transposed convolution with kernel size equal to the stride (non-overlapping).

    Weight shape is ``(Cin, Cout, stride, stride)``; output is ``stride``
    times larger in each spatial axis.
    """
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise DimensionError("transposed_conv2d expects 4-D input and weight")
    n, cin, h, wdt = xd.shape
    if wd.shape[0] != cin:
        raise DimensionError(f"weight expects {wd.shape[0]} input channels, input has {cin}")
    if wd.shape[2] != stride or wd.shape[3] != stride:
        raise ConfigError("transposed_conv2d supports kernel size == stride only")
    cout = wd.shape[1]
    s = stride
    # out[n, o, i, a, j, c] = sum_k x[n, k, i, j] w[k, o, a, c]
    xm = xd.transpose(0, 2, 3, 1).reshape(-1, cin)
    wm = wd.reshape(cin, -1)
    y = (xm @ wm).reshape(n, h, wdt, cout, s, s)
    out = np.ascontiguousarray(y.transpose(0, 3, 1, 4, 2, 5)).reshape(n, cout, h * s, wdt * s)
    if b is not None:
        out += b.data.reshape(1, cout, 1, 1)

    def backward(g):
        gy = g.reshape(n, cout, h, s, wdt, s).transpose(0, 2, 4, 1, 3, 5).reshape(-1, cout * s * s)
        dx = (gy @ wm.T).reshape(n, h, wdt, cin).transpose(0, 3, 1, 2)
        dw = (xm.T @ gy).reshape(wd.shape)
        db = g.sum(axis=(0, 2, 3)) if b is not None else None
        return np.ascontiguousarray(dx), dw, db

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out, parents, backward)
