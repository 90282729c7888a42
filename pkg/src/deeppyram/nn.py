"""Minimal module system: parameter registration, train/eval mode, layers."""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor, get_default_dtype


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=get_default_dtype()), requires_grad=True)


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)


class Module:
    """Container that discovers parameters, buffers and children by attribute."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Module):
                yield from val.named_buffers(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{name}.{i}.")
        for key, buf in self._buffers().items():
            yield f"{prefix}{key}", buf

    def _buffers(self) -> dict:
        return {}

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((k, p.data) for k, p in self.named_parameters())
        state.update((k, b) for k, b in self.named_buffers())
        return state

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"missing entries in state: {sorted(missing)[:5]}")
        for k, v in state.items():
            target = params[k].data if k in params else buffers.get(k)
            if target is None:
                raise KeyError(f"unexpected entry {k!r}")
            if target.size != np.size(v):
                raise ValueError(f"{k}: expected {target.shape}, got {np.shape(v)}")
            target[...] = np.asarray(v).reshape(target.shape)

    def to(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, cin, cout, kernel=3, rng=None, padding=None, dilation=1, groups=1, bias=True, zero=False):
        rng = rng if rng is not None else np.random.default_rng(0)
        shape = (cout, cin // groups, kernel, kernel)
        fan_in = shape[1] * kernel * kernel
        self.weight = parameter(np.zeros(shape) if zero else he_normal(rng, shape, fan_in))
        self.bias = parameter(np.zeros(cout)) if bias else None
        self.padding = dilation * (kernel // 2) if padding is None else padding
        self.dilation = dilation
        self.groups = groups

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, 1, self.padding, self.dilation, self.groups)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1):
        self.gamma = parameter(np.ones(channels))
        self.beta = parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.momentum = momentum

    def _buffers(self) -> dict:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, self.training, self.momentum)


class ConvBNReLU(Module):
    def __init__(self, cin, cout, rng, kernel=3, dilation=1):
        self.conv = Conv2d(cin, cout, kernel, rng, dilation=dilation, bias=False)
        self.bn = BatchNorm2d(cout)

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(self.bn(self.conv(x)))


class Upsample(Module):
    """x2 super-resolution: bilinear, transposed convolution or pixel shuffle."""

    def __init__(self, channels: int, mode: str, rng: Optional[np.random.Generator] = None):
        self.mode = mode
        rng = rng if rng is not None else np.random.default_rng(0)
        if mode == "transposed":
            self.weight = parameter(he_normal(rng, (channels, channels, 2, 2), channels))
            self.bias = parameter(np.zeros(channels))
        elif mode == "pixel_shuffle":
            self.expand = Conv2d(channels, 4 * channels, 1, rng)
        elif mode != "bilinear":
            raise ValueError(f"unknown upsample mode {mode!r}")

    def forward(self, x: Tensor, size: Optional[tuple] = None) -> Tensor:
        h, w = size if size is not None else (2 * x.shape[2], 2 * x.shape[3])
        if self.mode == "bilinear":
            return T.bilinear_upsample(x, h, w)
        if self.mode == "transposed":
            y = T.transposed_conv2d(x, self.weight, self.bias, 2)
        else:
            y = T.pixel_shuffle(self.expand(x), 2)
        if y.shape[2:] != (h, w):
            y = T.bilinear_upsample(y, h, w)
        return y
