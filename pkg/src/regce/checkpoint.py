"""Version-tagged binary container of named arrays.

Layout (little endian)::

    magic   8 bytes  b"RGCECKPT"
    version u32
    count   u32
    count x entry:
        name_len u16, name utf-8
        dtype_len u8, numpy dtype string (e.g. "<f4")
        ndim u8, ndim x u64 extents
        raw row-major payload
"""
from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"RGCECKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(arrays: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(arrays)))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        arr = arr.astype(dt, copy=False)
        key = name.encode("utf-8")
        dstr = dt.str.encode("ascii")
        buf.write(struct.pack("<H", len(key)) + key)
        buf.write(struct.pack("<B", len(dstr)) + dstr)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    if bytes(view[:8]) != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    version, count = struct.unpack_from("<II", view, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 16
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos : pos + nlen]).decode("utf-8")
            pos += nlen
            (dlen,) = struct.unpack_from("<B", view, pos)
            pos += 1
            dtype = np.dtype(bytes(view[pos : pos + dlen]).decode("ascii"))
            pos += dlen
            (ndim,) = struct.unpack_from("<B", view, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", view, pos)
            pos += 8 * ndim
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if pos + nbytes > len(view):
                raise CheckpointError(f"truncated payload for {name!r} at byte {pos}")
            out[name] = np.frombuffer(view[pos : pos + nbytes], dtype=dtype).reshape(shape).copy()
            pos += nbytes
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint at byte {pos}") from exc
    return out


def save(path, arrays: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(arrays))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
