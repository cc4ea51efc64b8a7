"""Versioned flat binary checkpoints.

Layout (all integers little-endian)::

    8 bytes   magic  b"BMGQCKPT"
    u32       format version
    u32       metadata length, then that many bytes of UTF-8 JSON
    u32       layer count
    per layer u16 name length, name, u8 ndim, ndim x u32 dims
    u8        1 if Adam state follows, else 0
    u64       Adam step counter
    f64 LE    parameter values, layer by layer in table order (C order)
    f64 LE    Adam first moments, then second moments (same order), if present

The JSON metadata carries the network config under ``"net"``.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import numpy as np

from .network import NetConfig, NetworkParams
from .optim import AdamState

MAGIC = b"BMGQCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def save_checkpoint(path, params: NetworkParams, optimizer_state: Optional[AdamState] = None,
                    metadata: Optional[dict] = None) -> Path:
    path = Path(path)
    meta = dict(metadata or {})
    meta["net"] = asdict(params.config)
    meta_b = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_b)), meta_b, struct.pack("<I", len(params.arrays))]
    for name, arr in params.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    has_opt = optimizer_state is not None
    parts.append(struct.pack("<BQ", int(has_opt), optimizer_state.t if has_opt else 0))
    blocks = [params.arrays]
    if has_opt:
        blocks += [optimizer_state.m, optimizer_state.v]
    for block in blocks:
        for name in params:
            parts.append(np.ascontiguousarray(block[name], dtype="<f8").tobytes())
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(
                f"checkpoint truncated: needed {n} bytes at offset {self.pos}, file has {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, expected: Optional[NetConfig] = None):
    """Return ``(params, optimizer_state_or_None, metadata)``; nothing is built until the whole file parses."""
    data = Path(path).read_bytes()
    r = _Reader(data)
    if len(data) < len(MAGIC) or data[:len(MAGIC)] != MAGIC:
        raise CheckpointMagicError(f"{path}: not a checkpoint (bad magic bytes)")
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, this build reads {VERSION}")
    (mlen,) = r.unpack("<I")
    meta = json.loads(r.take(mlen).decode("utf-8"))
    (n_layers,) = r.unpack("<I")
    table = []
    for _ in range(n_layers):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        dims = r.unpack(f"<{ndim}I") if ndim else ()
        table.append((name, tuple(dims)))
    has_opt, t = r.unpack("<BQ")
    blocks = []
    for _ in range(3 if has_opt else 1):
        block = {}
        for name, dims in table:
            n = int(np.prod(dims)) if dims else 1
            block[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(dims).astype(np.float64)
        blocks.append(block)
    if r.pos != len(data):
        raise CheckpointTruncatedError(f"{path}: {len(data) - r.pos} unexpected trailing bytes")
    config = NetConfig(**meta["net"])
    if expected is not None:
        check_shapes(table, expected)
        config = expected
    else:
        check_shapes(table, config)
    params = NetworkParams(config, blocks[0])
    opt = AdamState(blocks[1], blocks[2], int(t)) if has_opt else None
    meta.pop("net")
    return params, opt, meta


def check_shapes(table, config: NetConfig) -> None:
    have = dict(table)
    for name, shape in config.layer_shapes().items():
        if name not in have:
            raise CheckpointShapeError(f"layer {name}: missing from checkpoint (expected shape {shape})")
        if have[name] != shape:
            raise CheckpointShapeError(f"layer {name}: checkpoint shape {have[name]} != expected {shape}")
    extra = [n for n in have if n not in config.layer_shapes()]
    if extra:
        raise CheckpointShapeError(f"layer {extra[0]}: present in checkpoint but not in this network")
