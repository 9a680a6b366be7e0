"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    magic  b"PSNASCK\\0"
    u32    format version
    u32    metadata length, then UTF-8 JSON metadata (step, seed, ...)
    u32    array count
    per array: u16 name length, UTF-8 name, u8 ndim, u32 dims..., float32 data
    u32    CRC-32 of everything above
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"PSNASCK\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(arrays: dict[str, np.ndarray], metadata: dict[str, Any] | None = None) -> bytes:
    meta = json.dumps(metadata or {}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if not np.issubdtype(arr.dtype, np.floating) and arr.dtype != bool:
            raise CheckpointError(f"array {name!r} has unsupported dtype {arr.dtype}")
        if arr.dtype == np.float64 and not np.array_equal(arr.astype(np.float32), arr):
            raise CheckpointError(f"array {name!r} is float64 and would lose precision")
        key = name.encode()
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if len(blob) < len(MAGIC) + 16 or blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint is corrupt (checksum mismatch)")
    pos = len(MAGIC)

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(body):
            raise CheckpointError("checkpoint is truncated")
        out = struct.unpack_from(fmt, body, pos)
        pos += size
        return out

    version, meta_len = take("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta = json.loads(body[pos:pos + meta_len].decode())
    pos += meta_len
    (count,) = take("<I")
    arrays = {}
    for _ in range(count):
        (name_len,) = take("<H")
        name = body[pos:pos + name_len].decode()
        pos += name_len
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I")
        n = int(np.prod(shape, dtype=np.int64)) * 4
        if pos + n > len(body):
            raise CheckpointError(f"array {name!r} is truncated")
        arrays[name] = np.frombuffer(body, "<f4", n // 4, pos).reshape(shape).astype(np.float32)
        pos += n
    if pos != len(body):
        raise CheckpointError("trailing bytes after the last array")
    return arrays, meta


def save(path: str | Path, arrays: dict[str, np.ndarray], metadata: dict[str, Any] | None = None) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(arrays, metadata))
    tmp.replace(path)


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")
    return decode(path.read_bytes())
