"""Named-tensor checkpoint container with a small binary format.

Layout (little-endian): magic "SWDM", u32 version=1, u32 entry count, then per
entry u16 name length, UTF-8 name, u8 dtype (0 = f32), u8 ndim, ndim x u32
dims, raw f32 payload. Reads are all-or-nothing: a bad magic, version, dtype,
or truncated payload raises without returning a partial manifest.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SWDM"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_checkpoint(path, arrays: dict) -> None:
    """Entries are written sorted by name so files are byte-reproducible."""
    chunks = [struct.pack("<4sII", MAGIC, VERSION, len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype=np.float32)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<BB", 0, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path) -> dict:
    raw = Path(path).read_bytes()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(raw):
            raise CheckpointError("truncated checkpoint")
        out = raw[off:off + n]
        off += n
        return out

    magic, version, count = struct.unpack("<4sII", take(12))
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        dtype, ndim = struct.unpack("<BB", take(2))
        if dtype != 0:
            raise CheckpointError(f"unsupported dtype {dtype} for {name}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        payload = take(4 * size)
        arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if off != len(raw):
        raise CheckpointError(f"{len(raw) - off} trailing bytes")
    return arrays
