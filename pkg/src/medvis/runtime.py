"""Thread-count control and run-manifest helpers."""

from __future__ import annotations

import contextlib
import hashlib
import json
import os
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_info, threadpool_limits

from . import __version__
from .numerics.snapshot import atomic_write_bytes

THREADS_ENV = "MEDVIS_THREADS"


def requested_threads() -> int | None:
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return None
    n = int(raw)
    if n < 1:
        raise ValueError(f"{THREADS_ENV} must be >= 1, got {raw!r}")
    return n


def thread_count() -> int:
    req = requested_threads()
    if req is not None:
        return req
    counts = [info.get("num_threads", 1) for info in threadpool_info() if info.get("user_api") == "blas"]
    return max(counts, default=1)


@contextlib.contextmanager
def limited_threads():
    """Apply the thread count from the environment (if set) to BLAS pools."""
    req = requested_threads()
    if req is None:
        yield thread_count()
        return
    with threadpool_limits(limits=req, user_api="blas"):
        yield req


def code_version_hash() -> str:
    """Git-style blob hash of the package version string."""
    body = f"medvis {__version__}".encode()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def write_json(path: str | os.PathLike, obj) -> Path:
    path = Path(path)
    atomic_write_bytes(path, (json.dumps(obj, indent=1, default=_jsonable) + "\n").encode())
    return path


def write_text(path: str | os.PathLike, text: str) -> Path:
    path = Path(path)
    atomic_write_bytes(path, text.encode())
    return path


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (set, tuple)):
        return list(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def manifest(config: dict, seeds: dict, timings: dict | None = None, weight_source: str | None = None,
             extra: dict | None = None) -> dict:
    out = {
        "config": config,
        "seeds": seeds,
        "threads": thread_count(),
        "code_version": code_version_hash(),
        "weight_source": weight_source,
        "timings": timings or {},
    }
    if extra:
        out.update(extra)
    return out
