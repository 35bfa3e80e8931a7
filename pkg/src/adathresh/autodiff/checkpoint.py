"""Binary parameter checkpoints.

Layout (all integers little-endian):

    offset  size  field
    0       4     magic b"ATCK"
    4       2     format version (1)
    6       2     reserved, 0
    8       8     total record size in bytes, header included
    16      4     number of entries
    then per entry, in ascending name order:
            2     name length L
            L     name, UTF-8
            1     ndim
            4*ndim  dimensions (uint32)
            8*prod(dims)  values, float64, C order
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"ATCK"
VERSION = 1
_HEAD = struct.Struct("<4sHHQI")


class CheckpointError(ValueError):
    pass


def dumps(params: dict[str, np.ndarray]) -> bytes:
    body = bytearray()
    for name in sorted(params):
        arr = np.asarray(params[name], dtype="<f8", order="C")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 255:
            raise CheckpointError(f"entry {name!r} cannot be encoded")
        body += struct.pack("<H", len(raw)) + raw
        body += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += arr.tobytes()
    total = _HEAD.size + len(body)
    return _HEAD.pack(MAGIC, VERSION, 0, total, len(params)) + bytes(body)


def loads(data: bytes) -> dict[str, np.ndarray]:
    if len(data) < _HEAD.size:
        raise CheckpointError("truncated checkpoint header")
    magic, version, _, total, count = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if total != len(data):
        raise CheckpointError(f"size field {total} does not match record length {len(data)}")
    pos = _HEAD.size
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * size > len(data):
                raise CheckpointError(f"truncated values for {name!r}")
            out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
            pos += 8 * size
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(data):
        raise CheckpointError("trailing bytes after last entry")
    return out


def save(path, params) -> None:
    with open(path, "wb") as f:
        f.write(dumps(params))


def load(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return loads(f.read())
