"""Versioned binary checkpoint container.

Layout (all integers little-endian):

    magic "SEQR" | u32 format version | u32 config length | config bytes
    | u32 tensor count | tensor records

Each tensor record: u32 name length, UTF-8 name, u32 rank, u64 extents,
u8 precision tag (4 = float32, 8 = float64), raw values. Tensors are written
in sorted-name order so save(load(save(x))) is byte-identical.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from seqrec import numcore as nc

MAGIC = b"SEQR"
FORMAT_VERSION = 1

_TAG_TO_DTYPE = {4: np.dtype("<f4"), 8: np.dtype("<f8")}
_DTYPE_TO_TAG = {np.dtype(np.float32): 4, np.dtype(np.float64): 8}


class CheckpointError(Exception):
    pass


def _encode_config(config: dict) -> bytes:
    lines = [f"{key} = {config[key]}" for key in sorted(config)]
    return ("\n".join(lines) + "\n").encode("utf-8") if lines else b""


def _decode_config(blob: bytes) -> dict[str, str]:
    fields: dict[str, str] = {}
    for line in blob.decode("utf-8").splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    return fields


def save_checkpoint(params: dict[str, nc.Tensor], config: dict, path):
    names = sorted(params)
    if len(set(names)) != len(names):
        raise CheckpointError("tensor name collision")
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", FORMAT_VERSION)
    cfg = _encode_config(config)
    out += struct.pack("<I", len(cfg))
    out += cfg
    out += struct.pack("<I", len(names))
    for name in names:
        arr = params[name].data
        tag = _DTYPE_TO_TAG.get(arr.dtype)
        if tag is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
        nb = name.encode("utf-8")
        out += struct.pack("<I", len(nb))
        out += nb
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += struct.pack("<B", tag)
        out += np.ascontiguousarray(arr, dtype=_TAG_TO_DTYPE[tag]).tobytes()
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]


def load_checkpoint(path, requires_grad: bool = True
                    ) -> tuple[dict[str, nc.Tensor], dict[str, str]]:
    rd = _Reader(Path(path).read_bytes(), path)
    if rd.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a seqrec checkpoint")
    version = rd.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    config = _decode_config(rd.take(rd.u32()))
    count = rd.u32()
    params: dict[str, nc.Tensor] = {}
    for _ in range(count):
        name = rd.take(rd.u32()).decode("utf-8")
        if name in params:
            raise CheckpointError(f"{path}: tensor name collision {name!r}")
        rank = rd.u32()
        shape = struct.unpack(f"<{rank}Q", rd.take(8 * rank))
        tag = rd.u8()
        dtype = _TAG_TO_DTYPE.get(tag)
        if dtype is None:
            raise CheckpointError(f"{path}: unknown precision tag {tag}")
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(rd.take(size * dtype.itemsize), dtype=dtype)
        arr = arr.reshape(shape).astype(dtype.newbyteorder("="), copy=True)
        params[name] = nc.Tensor(arr, requires_grad=requires_grad, name=name)
    if rd.pos != len(rd.blob):
        raise CheckpointError(f"{path}: trailing bytes after last tensor")
    return params, config
