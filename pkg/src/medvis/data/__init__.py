from .augment import AugmentParams, apply_augment, augment
from .splits import DatasetSplit, few_shot_subset, make_split
from .synthetic import SyntheticSpec, generate_case, generate_dataset, write_dataset
from .volume import (
    Mask,
    TruncatedPayloadError,
    UnsupportedDtypeError,
    UnsupportedFormatError,
    Volume,
    VolumeFormatError,
    load_cases,
    load_mask,
    load_volume,
    save_mask,
    save_volume,
)

__all__ = [
    "AugmentParams",
    "DatasetSplit",
    "Mask",
    "SyntheticSpec",
    "TruncatedPayloadError",
    "UnsupportedDtypeError",
    "UnsupportedFormatError",
    "Volume",
    "VolumeFormatError",
    "apply_augment",
    "augment",
    "few_shot_subset",
    "generate_case",
    "generate_dataset",
    "load_cases",
    "load_mask",
    "load_volume",
    "make_split",
    "save_mask",
    "save_volume",
    "write_dataset",
]
