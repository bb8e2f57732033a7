"""Binary checkpoint format.

Layout (all integers little-endian)::

    8 bytes   magic  b"ECFUSCK\\0"
    u32       format version (1)
    u32       tensor count N
    N times:  u16 name length, UTF-8 name, u8 ndim, ndim x u32 extents
    payload   every tensor in table order, row-major, float64 little-endian

Tensors are written in sorted-name order so the file only depends on the
parameter values.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"ECFUSCK\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(arrays):
    names = sorted(arrays)
    head = [MAGIC, struct.pack("<II", VERSION, len(names))]
    for n in names:
        raw = n.encode("utf-8")
        shape = np.shape(arrays[n])
        head.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", len(shape)))
        head.append(struct.pack(f"<{len(shape)}I", *shape))
    body = [np.ascontiguousarray(arrays[n], dtype="<f8").tobytes() for n in names]
    return b"".join(head + body)


def loads(blob):
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    off = 8
    try:
        version, count = struct.unpack_from("<II", blob, off)
        off += 8
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        table = []
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + ln].decode("utf-8")
            off += ln
            (nd,) = struct.unpack_from("<B", blob, off)
            off += 1
            shape = struct.unpack_from(f"<{nd}I", blob, off)
            off += 4 * nd
            table.append((name, shape))
    except struct.error as e:
        raise CheckpointError(f"truncated checkpoint header: {e}") from None
    out = {}
    for name, shape in table:
        n = int(np.prod(shape, dtype=np.int64))
        if off + 8 * n > len(blob):
            raise CheckpointError(f"truncated payload at tensor {name!r}")
        out[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(shape)
        off += 8 * n
    if off != len(blob):
        raise CheckpointError(f"{len(blob) - off} trailing bytes after payload")
    return out


def save(path, params):
    Path(path).write_bytes(dumps(params.arrays()))


def load(path, params):
    """Fill ``params`` in place from ``path``; shape mismatches name the tensor."""
    params.load_arrays(loads(Path(path).read_bytes()))
    return params
