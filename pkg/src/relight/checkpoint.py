"""Binary checkpoint format.

Layout (all integers little endian)::

    b"DMSH"                       magic
    u32                           format version
    u32 + bytes                   config block: length, then UTF-8 JSON (sorted keys)
    u32                           tensor count
    per tensor:
        u16 + bytes               name length, UTF-8 name
        u8                        ndim
        u32 * ndim                dims
        f32 * prod(dims)          raw data

Adam moments are stored as extra tensors named ``adam.m.<param>`` and
``adam.v.<param>``; the step counter lives in the config block.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .net import NetConfig

MAGIC = b"DMSH"
VERSION = 1


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


@dataclass
class Checkpoint:
    config: NetConfig
    params: dict
    adam: Optional[AdamState] = None
    global_step: int = 0
    stage: int = 0
    # not serialised; filled in by training
    history: list = field(default_factory=list, repr=False, compare=False)


def _config_block(ckpt: Checkpoint) -> bytes:
    meta = {
        "net": ckpt.config.to_dict(),
        "global_step": int(ckpt.global_step),
        "stage": int(ckpt.stage),
        "adam_t": None if ckpt.adam is None else int(ckpt.adam.t),
    }
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _tensors(ckpt: Checkpoint):
    for name, t in ckpt.params.items():
        yield name, t.data if isinstance(t, T.Tensor) else t
    if ckpt.adam is not None:
        # a stage that ran no steps leaves a fresh state without moments
        for name in (n for n in ckpt.params if n in ckpt.adam.m):
            yield f"adam.m.{name}", ckpt.adam.m[name]
            yield f"adam.v.{name}", ckpt.adam.v[name]


def to_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    block = _config_block(ckpt)
    buf.write(struct.pack("<I", len(block)))
    buf.write(block)
    items = list(_tensors(ckpt))
    buf.write(struct.pack("<I", len(items)))
    for name, arr in items:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(
                f"checkpoint truncated reading {what}: need {n} bytes at offset {self.pos}, "
                f"file has {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def from_bytes(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise BadMagicError("not a checkpoint: bad magic")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {VERSION}")
    (n,) = r.unpack("<I", "config length")
    meta = json.loads(r.take(n, "config block").decode("utf-8"))
    (count,) = r.unpack("<I", "tensor count")
    arrays = {}
    for _ in range(count):
        (ln,) = r.unpack("<H", "name length")
        name = r.take(ln, "name").decode("utf-8")
        (ndim,) = r.unpack("<B", "ndim")
        dims = r.unpack(f"<{ndim}I", "dims")
        size = int(np.prod(dims)) if dims else 1
        raw = r.take(4 * size, f"tensor {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after last tensor")

    dtype = T.get_dtype()
    params, m, v = {}, {}, {}
    for name, arr in arrays.items():
        if name.startswith("adam.m."):
            m[name[7:]] = arr
        elif name.startswith("adam.v."):
            v[name[7:]] = arr
        else:
            params[name] = T.Tensor(arr.astype(dtype), requires_grad=True)
    adam = None
    if meta.get("adam_t") is not None:
        adam = AdamState(m=m, v=v, t=int(meta["adam_t"]))
    return Checkpoint(NetConfig(**meta["net"]), params, adam,
                      int(meta["global_step"]), int(meta["stage"]))


def save(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)


def load(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
