"""Named-tensor container.

Layout (little endian)::

    magic   8 bytes  b"MMBRLCK\\0"
    version u32
    count   u32
    sha256  32 bytes over the record section
    records: name_len u32, name utf-8, ndim u32, dims u64 * ndim, f64 * prod(dims)
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MMBRLCK\0"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(tensors: dict[str, np.ndarray]) -> bytes:
    body = bytearray()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        nb = name.encode("utf-8")
        body += struct.pack("<I", len(nb)) + nb
        body += struct.pack("<I", arr.ndim)
        body += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        body += arr.tobytes()
    head = MAGIC + struct.pack("<II", FORMAT_VERSION, len(tensors))
    return bytes(head + hashlib.sha256(body).digest() + body)


def decode(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = blob[16:48]
    body = memoryview(blob)[48:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch")
    out = {}
    pos = 0
    for _ in range(count):
        (n,) = struct.unpack_from("<I", body, pos)
        pos += 4
        name = bytes(body[pos:pos + n]).decode("utf-8")
        pos += n
        (nd,) = struct.unpack_from("<I", body, pos)
        pos += 4
        shape = struct.unpack_from(f"<{nd}Q", body, pos)
        pos += 8 * nd
        size = int(np.prod(shape)) if nd else 1
        out[name] = np.frombuffer(body, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    if pos != len(body):
        raise CheckpointError("trailing bytes after records")
    return out


def save(path, tensors: dict[str, np.ndarray]) -> str:
    blob = encode(tensors)
    Path(path).write_bytes(blob)
    return blob[16:48].hex()


def load(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


def file_checksum(path) -> str:
    return Path(path).read_bytes()[16:48].hex()
