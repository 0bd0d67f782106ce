"""Binary checkpoint format for named f32 tensors.

Layout (all integers little-endian)::

    b"TGCL" | version u32 | count u32
    per tensor: name_len u32 | utf-8 name | rank u32 | dims u64 * rank | f32 data
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"TGCL"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointError("bad magic; not a TGCL checkpoint")
    pos = 4
    try:
        version, count = struct.unpack_from("<II", view, pos)
        pos += 8
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", view, pos)
            pos += 4
            name = bytes(view[pos:pos + n]).decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", view, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", view, pos)
            pos += 8 * rank
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            nbytes = 4 * size
            if pos + nbytes > len(view):
                raise CheckpointError(f"truncated data for tensor {name!r}")
            out[name] = np.frombuffer(view[pos:pos + nbytes], dtype="<f4").astype(np.float32).reshape(dims)
            pos += nbytes
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(view):
        raise CheckpointError("trailing bytes after last tensor")
    return out


def save(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
