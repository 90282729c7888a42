"""Binary checkpoint format.

Layout (all integers little-endian u32)::

    b"DPYR" | version | header_len | header (UTF-8 JSON, sorted keys)
    count
    count x [ name_len | name (UTF-8) | d0 d1 d2 d3 | float32 LE data ]

The header holds ``{"model": ModelConfig.to_dict(), "meta": {...}}``.
Extents are the tensor shape left-padded with 1s to four entries.  Entries
are parameters followed by batch-norm running statistics, in module
attribute order.  Nothing time-dependent is written, so identical weights
give identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DataError
from .model import DeepPyram, ModelConfig

MAGIC = b"DPYR"
VERSION = 1
_U32 = struct.Struct("<I")


def _extents(shape) -> tuple:
    if len(shape) > 4:
        raise ValueError(f"cannot store a {len(shape)}-d tensor")
    return (1,) * (4 - len(shape)) + tuple(int(s) for s in shape)


def to_bytes(model: DeepPyram, meta: Optional[dict] = None) -> bytes:
    header = json.dumps({"model": model.config.to_dict(), "meta": meta or {}}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(header)), header]
    state = model.state_dict()
    parts.append(_U32.pack(len(state)))
    for name, arr in state.items():
        raw = name.encode("utf-8")
        parts += [_U32.pack(len(raw)), raw, struct.pack("<4I", *_extents(arr.shape))]
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise DataError("checkpoint is truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def from_bytes(buf: bytes):
    """Return ``(model, meta)``; the model is in eval mode."""
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise DataError("not a checkpoint file (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    header = json.loads(r.take(r.u32()).decode("utf-8"))
    model = DeepPyram(ModelConfig.from_dict(header["model"]))
    state = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        dims = struct.unpack("<4I", r.take(16))
        count = int(np.prod(dims))
        state[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims)
    if r.pos != len(buf):
        raise DataError("trailing bytes after checkpoint payload")
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise DataError(f"checkpoint does not match its config: {exc}") from exc
    return model.eval(), header.get("meta", {})


def save(model: DeepPyram, path, meta: Optional[dict] = None) -> None:
    Path(path).write_bytes(to_bytes(model, meta))


def load(path):
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(buf)
