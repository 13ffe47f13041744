from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import Mask, Volume


@dataclass(frozen=True)
class AugmentParams:
    flips: tuple[bool, bool, bool] = (False, False, False)
    scale: float = 1.0
    shift: float = 0.0  # as a fraction of the intensity range

    @classmethod
    def sample(cls, seed: int) -> AugmentParams:
        rng = np.random.default_rng(seed)
        flips = tuple(bool(f) for f in rng.random(3) < 0.5)
        return cls(flips, float(rng.uniform(0.9, 1.1)), float(rng.uniform(-0.05, 0.05)))

    @property
    def is_identity(self) -> bool:
        return not any(self.flips) and self.scale == 1.0 and self.shift == 0.0


def apply_augment(volume: Volume, mask: Mask, params: AugmentParams) -> tuple[Volume, Mask]:
    """Flips act on both arrays; intensity scale/shift act on the volume only."""
    if volume.shape != mask.shape:
        raise ValueError(f"volume {volume.shape} and mask {mask.shape} differ")
    if params.is_identity:
        return volume, mask
    x = volume.intensities
    m = mask.labels
    axes = tuple(i for i, f in enumerate(params.flips) if f)
    if axes:
        x = np.flip(x, axes)
        m = np.flip(m, axes)
    if params.scale != 1.0 or params.shift != 0.0:
        span = float(x.max() - x.min())
        x = x * np.float32(params.scale) + np.float32(params.shift * span)
    return (
        Volume(np.ascontiguousarray(x, dtype=volume.intensities.dtype), volume.spacing, volume.case_id),
        Mask(np.ascontiguousarray(m), mask.case_id, mask.spacing),
    )


def augment(volume: Volume, mask: Mask, seed: int) -> tuple[Volume, Mask]:
    return apply_augment(volume, mask, AugmentParams.sample(seed))
