"""Named-array container used for models, blendshapes and ground truth.

Layout (all little-endian)::

    magic     8 bytes   b"MFARCHV\\0"
    version   u32
    count     u32
    then `count` records:
        name_len  u16, name (utf-8)
        kind      1 byte, b"f" (float64) or b"i" (int64)
        ndim      u8
        shape     ndim x u64
        payload   prod(shape) x 8 bytes
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MFARCHV\0"
VERSION = 1


class ArchiveError(ValueError):
    pass


def write_archive(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, value in arrays.items():
        arr = np.asarray(value)
        if arr.dtype.kind in "iub":
            kind, data = b"i", arr.astype("<i8")
        elif arr.dtype.kind == "f":
            kind, data = b"f", arr.astype("<f8")
        else:
            raise ArchiveError(f"array {name!r} has unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(kind)
        chunks.append(struct.pack("<B", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}Q", *data.shape))
        chunks.append(np.ascontiguousarray(data).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_archive(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"archive not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise ArchiveError(f"{path}: not an array archive (bad magic)")
    version, count = struct.unpack_from("<II", raw, 8)
    if version != VERSION:
        raise ArchiveError(f"{path}: unsupported archive version {version}")
    pos = 16
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + name_len].decode("utf-8")
            pos += name_len
            kind = raw[pos:pos + 1]
            pos += 1
            (ndim,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
            pos += 8 * ndim
            n = int(np.prod(shape, dtype=np.int64))
            dtype = {b"f": "<f8", b"i": "<i8"}.get(kind)
            if dtype is None:
                raise ArchiveError(f"{path}: array {name!r} has unknown kind {kind!r}")
            if pos + 8 * n > len(raw):
                raise ArchiveError(f"{path}: truncated payload for {name!r}")
            out[name] = np.frombuffer(raw, dtype=dtype, count=n, offset=pos).reshape(shape).copy()
            pos += 8 * n
    except struct.error as exc:
        raise ArchiveError(f"{path}: truncated archive") from exc
    return out
