"""Volume/mask data model and the two on-disk formats we read.

raw+json
    ``<stem>.json`` holds ``{"shape": [...], "dtype": "float32", "spacing": [...]}``;
    ``<stem>.raw`` holds the little-endian, row-major payload.

NIfTI-1 subset
    Single-file ``.nii`` (optionally gzip-wrapped), 348-byte header with magic
    ``n+1\\0`` at offset 344, 3D data of dtype code 4 (int16) or 16 (float32).
    Array axes follow the header's dim[1..3]; the payload is read in NIfTI
    (x-fastest) order. scl_slope/scl_inter are applied when slope != 0.
"""

from __future__ import annotations

import gzip
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..numerics.snapshot import atomic_write_bytes


class VolumeFormatError(ValueError):
    pass


class UnsupportedFormatError(VolumeFormatError):
    pass


class UnsupportedDtypeError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


@dataclass
class Volume:
    intensities: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    case_id: str = ""

    def __post_init__(self):
        self.intensities = np.asarray(self.intensities)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.intensities.ndim != 3 or min(self.intensities.shape) < 1:
            raise ValueError(f"volume must be 3D with extents >= 1, got {self.intensities.shape}")
        if not np.all(np.isfinite(self.intensities)):
            raise ValueError(f"volume {self.case_id!r} has non-finite intensities")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.intensities.shape


@dataclass
class Mask:
    labels: np.ndarray
    case_id: str = ""
    spacing: tuple[float, float, float] = field(default=(1.0, 1.0, 1.0))

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise ValueError(f"mask must be 3D, got {labels.shape}")
        if not np.all((labels == 0) | (labels == 1)):
            raise ValueError(f"mask {self.case_id!r} is not binary")
        self.labels = labels.astype(np.uint8)
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape


_RAW_DTYPES = {"float32": "<f4", "float64": "<f8", "int16": "<i2", "uint8": "u1", "int32": "<i4"}


def _stem(path: Path) -> Path:
    return path.with_suffix("") if path.suffix in (".json", ".raw") else path


def save_raw(path: str | os.PathLike, array: np.ndarray, spacing=None) -> Path:
    """Write ``<stem>.raw`` + ``<stem>.json``; returns the sidecar path."""
    stem = _stem(Path(path))
    array = np.asarray(array)
    name = array.dtype.name
    if name not in _RAW_DTYPES:
        raise UnsupportedDtypeError(f"cannot store dtype {name} as raw+json")
    meta = {"shape": list(array.shape), "dtype": name}
    if spacing is not None:
        meta["spacing"] = [float(s) for s in spacing]
    payload = np.ascontiguousarray(array, dtype=_RAW_DTYPES[name]).tobytes()
    raw_path = stem.with_suffix(".raw")
    atomic_write_bytes(raw_path, payload)
    json_path = stem.with_suffix(".json")
    atomic_write_bytes(json_path, json.dumps(meta, indent=1).encode())
    return json_path


def load_raw(path: str | os.PathLike) -> tuple[np.ndarray, tuple[float, ...] | None]:
    stem = _stem(Path(path))
    try:
        meta = json.loads(stem.with_suffix(".json").read_text())
        shape = tuple(int(s) for s in meta["shape"])
        name = meta["dtype"]
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise UnsupportedFormatError(f"{stem}.json: malformed raw+json sidecar ({exc})") from exc
    if name not in _RAW_DTYPES:
        raise UnsupportedDtypeError(f"{stem}.json: unsupported dtype {name!r}")
    dt = np.dtype(_RAW_DTYPES[name])
    buf = stem.with_suffix(".raw").read_bytes()
    need = int(np.prod(shape)) * dt.itemsize
    if len(buf) < need:
        raise TruncatedPayloadError(f"{stem}.raw: expected {need} bytes, found {len(buf)}")
    arr = np.frombuffer(buf[:need], dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    spacing = tuple(meta["spacing"]) if "spacing" in meta else None
    return arr, spacing


# NIfTI-1 header offsets
_NII_DTYPES = {4: np.dtype("i2"), 16: np.dtype("f4")}
_NII_CODE = {np.dtype("int16"): 4, np.dtype("float32"): 16}


def read_nifti(buf: bytes) -> tuple[np.ndarray, tuple[float, float, float]]:
    if buf[:2] == b"\x1f\x8b":
        buf = gzip.decompress(buf)
    if len(buf) < 348:
        raise TruncatedPayloadError(f"NIfTI header needs 348 bytes, found {len(buf)}")
    magic = buf[344:348]
    if magic != b"n+1\0":
        raise UnsupportedFormatError(f"unsupported NIfTI magic {magic!r} (only single-file 'n+1' is read)")
    if struct.unpack("<i", buf[:4])[0] == 348:
        end = "<"
    elif struct.unpack(">i", buf[:4])[0] == 348:
        end = ">"
    else:
        raise UnsupportedFormatError("sizeof_hdr is not 348")
    dim = struct.unpack(f"{end}8h", buf[40:56])
    code = struct.unpack(f"{end}h", buf[70:72])[0]
    pixdim = struct.unpack(f"{end}8f", buf[76:108])
    vox_offset = struct.unpack(f"{end}f", buf[108:112])[0]
    slope, inter = struct.unpack(f"{end}2f", buf[112:120])
    ndim = dim[0]
    if not 3 <= ndim <= 7 or any(d != 1 for d in dim[4 : ndim + 1]):
        raise UnsupportedFormatError(f"only single-timepoint, single-channel 3D data is read (dim={dim})")
    if code not in _NII_DTYPES:
        raise UnsupportedDtypeError(f"unsupported NIfTI datatype code {code}")
    shape = tuple(int(d) for d in dim[1:4])
    dt = _NII_DTYPES[code].newbyteorder(end)
    start = int(vox_offset)
    need = int(np.prod(shape)) * dt.itemsize
    if start < 348 or len(buf) < start + need:
        raise TruncatedPayloadError(f"NIfTI payload needs {need} bytes at offset {start}, file has {len(buf)}")
    data = np.frombuffer(buf, dtype=dt, count=int(np.prod(shape)), offset=start)
    arr = data.reshape(shape, order="F")
    if slope != 0:
        arr = arr.astype(np.float32) * np.float32(slope) + np.float32(inter)
    arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("="))
    spacing = tuple(float(abs(p)) if p else 1.0 for p in pixdim[1:4])
    return arr, spacing


def encode_nifti(array: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> bytes:
    """Minimal little-endian single-file NIfTI-1 (no scaling, identity-free header)."""
    array = np.asarray(array)
    if array.ndim != 3 or array.dtype not in _NII_CODE:
        raise UnsupportedDtypeError(f"cannot encode {array.dtype} array of shape {array.shape}")
    hdr = bytearray(352)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, *array.shape, 1, 1, 1, 1)
    code = _NII_CODE[array.dtype]
    struct.pack_into("<hh", hdr, 70, code, array.dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, 352.0)
    hdr[344:348] = b"n+1\0"
    payload = np.asarray(array, dtype=array.dtype.newbyteorder("<")).tobytes(order="F")
    return bytes(hdr) + payload


def save_nifti(path: str | os.PathLike, array: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> None:
    data = encode_nifti(array, spacing)
    if str(path).endswith(".gz"):
        data = gzip.compress(data, mtime=0)
    atomic_write_bytes(path, data)


def load_array(path: str | os.PathLike) -> tuple[np.ndarray, tuple[float, ...] | None]:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        return load_raw(p)
    return read_nifti(p.read_bytes())


def _case_id(path) -> str:
    name = _stem(Path(path)).name
    return name.removesuffix(".gz").removesuffix(".nii")


def load_volume(path: str | os.PathLike, case_id: str | None = None) -> Volume:
    arr, spacing = load_array(path)
    if arr.ndim != 3:
        raise UnsupportedFormatError(f"{path}: expected a 3D array, got shape {arr.shape}")
    cid = case_id if case_id is not None else _case_id(path)
    return Volume(arr.astype(np.float32, copy=False), spacing or (1.0, 1.0, 1.0), cid)


def load_mask(path: str | os.PathLike, case_id: str | None = None) -> Mask:
    arr, spacing = load_array(path)
    cid = case_id if case_id is not None else _case_id(path)
    return Mask(arr, cid, spacing or (1.0, 1.0, 1.0))


def save_volume(path: str | os.PathLike, vol: Volume) -> Path:
    return save_raw(path, vol.intensities, vol.spacing)


def save_mask(path: str | os.PathLike, mask: Mask) -> Path:
    return save_raw(path, mask.labels, mask.spacing)


def read_manifest(path: str | os.PathLike) -> list[dict]:
    """Dataset manifest: JSON list of ``{"case_id", "volume", "mask"}``; paths relative to the file."""
    path = Path(path)
    entries = json.loads(path.read_text())
    out = []
    for e in entries:
        if not {"case_id", "volume", "mask"} <= set(e):
            raise VolumeFormatError(f"{path}: manifest entry missing keys: {e}")
        out.append({
            "case_id": e["case_id"],
            "volume": str((path.parent / e["volume"]).resolve()),
            "mask": str((path.parent / e["mask"]).resolve()),
        })
    return out


def load_cases(manifest_path: str | os.PathLike) -> list[tuple[Volume, Mask]]:
    cases = []
    for e in read_manifest(manifest_path):
        vol = load_volume(e["volume"], e["case_id"])
        mask = load_mask(e["mask"], e["case_id"])
        if vol.shape != mask.shape:
            raise VolumeFormatError(f"{e['case_id']}: volume {vol.shape} vs mask {mask.shape}")
        mask.spacing = vol.spacing
        cases.append((vol, mask))
    return cases
