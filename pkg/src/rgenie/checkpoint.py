"""Versioned binary checkpoint container.

Layout (all integers little-endian):
    magic  b"RGCK"
    u32    format version
    u32    entry count
    per entry:
        u32    name length, then utf-8 name
        u8     dtype code (0=f32, 1=f64, 2=i64, 3=u8)
        u32    ndim, then u64 extents
        raw    little-endian values, row-major

The content hash is sha256 over the full container bytes; identical parameter
sets always serialize to identical bytes (entries are sorted by name).
"""
from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC = b"RGCK"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1,
          np.dtype(np.int64): 2, np.dtype(np.uint8): 3}


def serialize(arrays: dict[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype not in _CODES:
            raise TypeError(f"unsupported checkpoint dtype {arr.dtype} for {name}")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<BI", _CODES[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.astype(arr.dtype.newbyteorder("<")).tobytes())
    return b"".join(chunks)


def deserialize(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise ValueError("not a checkpoint container (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        code, ndim = struct.unpack_from("<BI", blob, off)
        off += 5
        shape = struct.unpack_from(f"<{ndim}Q", blob, off)
        off += 8 * ndim
        dtype = _DTYPES[code]
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype=dtype, count=n, offset=off).reshape(shape)
        off += n * dtype.itemsize
        out[name] = arr.copy()
    return out


def save(path: str | Path, arrays: dict[str, np.ndarray]) -> str:
    """Write the container; returns its content hash."""
    blob = serialize(arrays)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load(path: str | Path) -> dict[str, np.ndarray]:
    return deserialize(Path(path).read_bytes())


def content_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
