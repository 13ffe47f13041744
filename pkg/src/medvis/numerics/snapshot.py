"""LBSW1 weight snapshots.

Layout: the 6 magic bytes ``b"LBSW1\\0"``, then one record per array until EOF::

    u32 LE   name length
    bytes    name (UTF-8)
    u8       dtype tag (0 = f32, 1 = f64)
    u8       rank
    u64 LE   extent, repeated ``rank`` times
    bytes    payload, little-endian, row-major
"""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile
from collections.abc import Mapping
from pathlib import Path

import numpy as np

MAGIC = b"LBSW1\0"
_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_OF = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class SnapshotFormatError(ValueError):
    pass


def encode(arrays: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAG_OF:
            raise SnapshotFormatError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        tag = _TAG_OF[arr.dtype]
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_TAGS[tag]).tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> dict[str, np.ndarray]:
    if buf[: len(MAGIC)] != MAGIC:
        raise SnapshotFormatError(f"bad magic {buf[:len(MAGIC)]!r}, expected {MAGIC!r}")
    out: dict[str, np.ndarray] = {}
    pos = len(MAGIC)
    end = len(buf)

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > end:
            raise SnapshotFormatError(f"truncated snapshot while reading {what} at byte {pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    while pos < end:
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        name = take(nlen, "name").decode("utf-8")
        tag, rank = struct.unpack("<BB", take(2, f"{name} header"))
        if tag not in _TAGS:
            raise SnapshotFormatError(f"{name}: unknown dtype tag {tag}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, f"{name} dims"))
        dt = _TAGS[tag]
        count = int(np.prod(dims)) if rank else 1
        payload = take(count * dt.itemsize, f"{name} payload")
        if name in out:
            raise SnapshotFormatError(f"duplicate record {name!r}")
        out[name] = np.frombuffer(payload, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    return out


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path: str | os.PathLike, arrays: Mapping[str, np.ndarray]) -> str:
    """Write a snapshot atomically; returns the sha256 of the file bytes."""
    data = encode(arrays)
    atomic_write_bytes(path, data)
    return hashlib.sha256(data).hexdigest()


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


def file_hash(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
