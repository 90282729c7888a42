"""Deformable dilated convolution with learned, clipped 2-D offsets.

Each of the ``Kh*Kw`` kernel taps reads the input at

    p0 + dilation * tap + offset(p0, tap)

with bilinear interpolation, reading zero outside the image.  For a fixed
offset field the sampling is a linear map of the input, stored as a
sparse ``(samples, pixels)`` matrix with four entries per row; the same
sparsity pattern carries the derivatives with respect to the sampling
coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .errors import DimensionError, DomainError
from .tensor import Tensor, conv2d, hardtanh, make_result


@dataclass
class DeformableConvSpec:
    """Weights and dilation of one deformable block."""

    weight: Tensor  # (Cout, Cin, 3, 3)
    offset_weight: Tensor  # (2*Kh*Kw, Cin, 3, 3)
    dilation: int
    bias: Optional[Tensor] = None

    @property
    def kernel(self) -> tuple:
        return self.weight.shape[2], self.weight.shape[3]


def tap_offsets(kh: int, kw: int, dilation: int) -> np.ndarray:
    """Dilated receptive-field displacements ``(Kh*Kw, 2)`` in row-major tap order."""
    ys, xs = np.meshgrid(np.arange(kh) - (kh - 1) // 2, np.arange(kw) - (kw - 1) // 2, indexing="ij")
    return np.stack([ys.ravel(), xs.ravel()], axis=1) * dilation


def _sampling_matrices(offsets: np.ndarray, kh: int, kw: int, dilation: int, hp: int, wp: int, margin: int):
    """Build the interpolation matrix and its y/x coordinate derivatives.

    Rows are ordered ``(n, h, w, tap)``; columns index the padded,
    channel-last input flattened as ``(n, hp, wp)``.
    """
    n, _, h, w = offsets.shape
    k = kh * kw
    taps = tap_offsets(kh, kw, dilation)
    off = offsets.reshape(n, k, 2, h, w).transpose(0, 3, 4, 1, 2)  # (n, h, w, k, 2)
    hh = np.arange(h).reshape(1, h, 1, 1)
    ww = np.arange(w).reshape(1, 1, w, 1)
    py = hh + taps[:, 0] + off[..., 0] + margin
    px = ww + taps[:, 1] + off[..., 1] + margin
    y0 = np.floor(py)
    x0 = np.floor(px)
    fy = (py - y0).astype(offsets.dtype).ravel()
    fx = (px - x0).astype(offsets.dtype).ravel()
    base = (np.arange(n).reshape(n, 1, 1, 1) * (hp * wp) + y0.astype(np.int64) * wp + x0.astype(np.int64)).ravel()

    rows = base.size
    indices = np.stack([base, base + 1, base + wp, base + wp + 1], axis=1).ravel()
    gy, gx = 1.0 - fy, 1.0 - fx
    val = np.stack([gy * gx, gy * fx, fy * gx, fy * fx], axis=1).ravel()
    dy = np.stack([-gx, -fx, gx, fx], axis=1).ravel()
    dx = np.stack([-gy, gy, -fy, fy], axis=1).ravel()
    indptr = np.arange(0, 4 * rows + 1, 4)
    shape = (rows, n * hp * wp)

    def mat(data):
        return sp.csr_matrix((data, indices, indptr), shape=shape)

    return mat(val), mat(dy), mat(dx)


def deformable_conv2d(
    x: Tensor,
    offsets: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    dilation: int = 1,
) -> Tensor:
    """Same-size deformable convolution (stride 1, padding = dilation).

    ``offsets`` has shape ``(N, 2*Kh*Kw, H, W)``; channel pair
    ``(2i, 2i+1)`` holds the (vertical, horizontal) displacement of tap
    ``i``.  Offsets are shared across input channels.
    """
    xd, od, wd = x.data, offsets.data, weight.data
    if xd.ndim != 4 or od.ndim != 4 or wd.ndim != 4:
        raise DimensionError("deformable_conv2d expects 4-D input, offsets and weight")
    n, c, h, w = xd.shape
    cout, cin, kh, kw = wd.shape
    k = kh * kw
    if cin != c:
        raise DimensionError(f"weight expects {cin} input channels, input has {c}")
    if od.shape != (n, 2 * k, h, w):
        raise DimensionError(f"offsets must have shape {(n, 2 * k, h, w)}, got {od.shape}")

    if not np.isfinite(od).all():
        raise DomainError("offsets must be finite")
    dtype = np.result_type(xd, wd, od)
    reach = dilation * max(kh // 2, kw // 2)
    margin = reach + int(math.ceil(float(np.abs(od).max(initial=0.0)))) + 1
    hp, wp = h + 2 * margin, w + 2 * margin
    xt = np.zeros((n, hp, wp, c), dtype=dtype)
    xt[:, margin : margin + h, margin : margin + w] = xd.transpose(0, 2, 3, 1)
    xt = xt.reshape(-1, c)

    a, ay, ax = _sampling_matrices(od.astype(dtype, copy=False), kh, kw, dilation, hp, wp, margin)
    cols = (a @ xt).reshape(n * h * w, k * c)  # columns ordered (tap, channel)
    wm = wd.reshape(cout, c, k).transpose(2, 1, 0).reshape(k * c, cout).astype(dtype, copy=False)
    out = (cols @ wm).reshape(n, h, w, cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * h * w, cout)
        dw = (cols.T @ gm).reshape(k, c, cout).transpose(2, 1, 0).reshape(wd.shape)
        dcols = (gm @ wm.T).reshape(n * h * w * k, c)
        dxt = (a.T @ dcols).reshape(n, hp, wp, c)
        dx = np.ascontiguousarray(dxt[:, margin : margin + h, margin : margin + w].transpose(0, 3, 1, 2))
        gy = np.einsum("sc,sc->s", ay @ xt, dcols)
        gx = np.einsum("sc,sc->s", ax @ xt, dcols)
        doff = np.stack([gy.reshape(n, h, w, k), gx.reshape(n, h, w, k)], axis=-1)
        doff = np.ascontiguousarray(doff.reshape(n, h, w, 2 * k).transpose(0, 3, 1, 2))
        db = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return dx, doff, dw, db

    parents = (x, offsets, weight) if bias is None else (x, offsets, weight, bias)
    return make_result(out, parents, backward)


def compute_offsets(x: Tensor, offset_weight: Tensor) -> Tensor:
    """Offset field ``hardtanh(conv3x3(x))``, same spatial size as ``x``."""
    if offset_weight.ndim != 4 or offset_weight.shape[1] != x.shape[1]:
        raise DimensionError(
            f"offset weight {offset_weight.shape} does not match input channels {x.shape[1]}"
        )
    kh = offset_weight.shape[2]
    return hardtanh(conv2d(x, offset_weight, None, padding=kh // 2))


def deformable_block(x: Tensor, spec: DeformableConvSpec) -> Tensor:
    """Offsets from the input, then deformable convolution at ``spec.dilation``."""
    offsets = compute_offsets(x, spec.offset_weight)
    return deformable_conv2d(x, offsets, spec.weight, spec.bias, spec.dilation)
