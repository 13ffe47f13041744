"""Synthetic segmentation cases standing in for real scans.

Voxel (i, j, k) sits at index coordinates (i, j, k); a structure contains a
voxel when that centre point lies inside it. The volume is
``contrast * mask + background + N(0, noise_sigma)``.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..numerics.snapshot import atomic_write_bytes
from .volume import Mask, Volume, save_mask, save_volume

KINDS = ("sphere", "ellipsoid", "torus", "two-blob")
MAX_TRIES = 10


@dataclass(frozen=True)
class SyntheticSpec:
    shape: tuple[int, int, int] = (32, 32, 32)
    kind: str = "sphere"
    noise_sigma: float = 0.3
    contrast: float = 1.0
    background: float = 0.0
    jitter: float = 4.0           # max centre offset per axis, voxels
    size: float = 8.0             # base radius, voxels
    size_jitter: float = 0.25     # radius scaled by U(1 - s, 1 + s)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if self.kind not in KINDS:
            raise ValueError(f"unknown structure kind {self.kind!r}; expected one of {KINDS}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ValueError(f"bad shape {self.shape}")
        if not 0 <= self.size_jitter < 1:
            raise ValueError("size_jitter must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shape"] = list(self.shape)
        d["spacing"] = list(self.spacing)
        return d


def _grid(shape):
    return np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij")


def rasterize(kind: str, shape, center, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """Binary mask and the structure's half-extent per axis (for bounds checks)."""
    z, y, x = _grid(shape)
    cz, cy, cx = center
    dz, dy, dx = z - cz, y - cy, x - cx
    r = radius
    if kind == "sphere":
        inside = dz**2 + dy**2 + dx**2 <= r**2
        half = np.array([r, r, r])
    elif kind == "ellipsoid":
        a, b, c = 1.3 * r, r, 0.7 * r
        inside = (dz / a) ** 2 + (dy / b) ** 2 + (dx / c) ** 2 <= 1.0
        half = np.array([a, b, c])
    elif kind == "torus":
        major, minor = r, 0.45 * r
        ring = np.sqrt(dy**2 + dx**2) - major
        inside = ring**2 + dz**2 <= minor**2
        half = np.array([minor, major + minor, major + minor])
    else:  # two-blob
        sep, br = 0.9 * r, 0.6 * r
        inside = ((dz**2 + dy**2 + (dx - sep) ** 2) <= br**2) | ((dz**2 + dy**2 + (dx + sep) ** 2) <= br**2)
        half = np.array([br, br, sep + br])
    return inside.astype(np.uint8), half


def generate_case(spec: SyntheticSpec, seed: int, case_id: str = "") -> tuple[Volume, Mask]:
    rng = np.random.default_rng(seed)
    shape = np.array(spec.shape, dtype=np.float64)
    mid = (shape - 1) / 2
    for _ in range(MAX_TRIES):
        radius = spec.size * rng.uniform(1 - spec.size_jitter, 1 + spec.size_jitter)
        center = mid + rng.uniform(-spec.jitter, spec.jitter, size=3)
        mask, half = rasterize(spec.kind, spec.shape, center, radius)
        if np.all(center - half >= 0) and np.all(center + half <= shape - 1):
            break
    else:
        raise ValueError(f"structure does not fit inside {spec.shape} after {MAX_TRIES} jitter draws")
    frac = mask.mean()
    if not 0.01 <= frac <= 0.40:
        raise ValueError(f"structure occupies {frac:.3%} of voxels; must be within 1%-40%")
    vol = spec.contrast * mask.astype(np.float64) + spec.background
    if spec.noise_sigma > 0:
        vol = vol + rng.normal(0.0, spec.noise_sigma, size=spec.shape)
    return (
        Volume(vol.astype(np.float32), spec.spacing, case_id),
        Mask(mask, case_id, spec.spacing),
    )


def case_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_dataset(spec: SyntheticSpec, n: int, seed: int, prefix: str = "case") -> list[tuple[Volume, Mask]]:
    return [generate_case(spec, case_seed(seed, i), f"{prefix}_{i:03d}") for i in range(n)]


def write_dataset(cases, out_dir: str | os.PathLike) -> Path:
    """Write cases as raw+json plus a ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for vol, mask in cases:
        vpath = save_volume(out / "volumes" / vol.case_id, vol)
        mpath = save_mask(out / "masks" / mask.case_id, mask)
        entries.append({
            "case_id": vol.case_id,
            "volume": str(vpath.relative_to(out)),
            "mask": str(mpath.relative_to(out)),
        })
    manifest = out / "manifest.json"
    atomic_write_bytes(manifest, json.dumps(entries, indent=1).encode())
    return manifest
