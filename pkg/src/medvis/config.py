"""Run configuration: one JSON file with data/model/insert/train/experiment sections.

Every field is optional. Unknown keys anywhere are rejected. ``resolve`` applies
defaults, and the resolved dump is what run manifests record, so feeding it
back in reproduces the run.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .ablation import VariantKind, build_variant
from .activations import TAPS
from .data.synthetic import SyntheticSpec
from .insert import LORA_TARGETS, FrozenBlockConfig
from .model import ModelSpec
from .trainer import TrainConfig
from .vit import ViTConfig

__all__ = ["ConfigError", "RunConfig", "load_config", "ValidationError"]


class ConfigError(ValueError):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


Triple = tuple[int, int, int]


class DataSection(_Section):
    n_cases: int = Field(40, ge=1, description="synthetic cases to generate")
    shape: Triple = (32, 32, 32)
    kind: Literal["sphere", "ellipsoid", "torus", "two-blob"] = "sphere"
    noise_sigma: float = Field(0.3, ge=0)
    contrast: float = 1.0
    background: float = 0.0
    jitter: float = Field(4.0, ge=0)
    size: float = Field(8.0, gt=0)
    size_jitter: float = Field(0.25, ge=0, lt=1)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0
    manifest: str | None = Field(None, description="existing dataset manifest; skips generation")

    def synthetic(self) -> SyntheticSpec:
        fields = self.model_dump(exclude={"n_cases", "seed", "manifest"})
        return SyntheticSpec(**fields)


class ModelSection(_Section):
    variant: VariantKind = VariantKind.VIT_BASELINE
    image_size: Triple = (32, 32, 32)
    patch_size: Triple = (4, 4, 4)
    embed_dim: int = Field(64, ge=1)
    depth: int = Field(2, ge=0)
    heads: int = Field(4, ge=1)
    mlp_ratio: float = Field(4.0, gt=0)
    decoder_depth: int = Field(1, ge=0)
    target_params: int | None = Field(None, ge=1, description="budget for vit-depth/vit-mlp; default llama-lora total")

    def vit(self) -> ViTConfig:
        return ViTConfig(**self.model_dump(exclude={"variant", "target_params"}))


class InsertSection(_Section):
    dim: int = Field(128, ge=1)
    heads: int = Field(4, ge=1)
    mlp_hidden: int = Field(512, ge=1)
    source: Literal["seeded-random", "snapshot"] = "seeded-random"
    weight_seed: int = 1234
    snapshot_path: str | None = None
    lora_targets: tuple[str, ...] = ("query", "value")
    rank: int = Field(4, ge=1)
    alpha: float | None = None
    mapper_bias: bool = True

    @field_validator("lora_targets")
    @classmethod
    def _known_targets(cls, v):
        bad = [t for t in v if t not in LORA_TARGETS]
        if bad:
            raise ValueError(f"unknown LoRA targets {bad}; allowed {list(LORA_TARGETS)}")
        return v

    def frozen_block(self) -> FrozenBlockConfig:
        return FrozenBlockConfig(**self.model_dump())


class TrainSection(_Section):
    epochs: int = Field(60, ge=0)
    lr: float = Field(2e-3, ge=0)
    batch_size: int = Field(4, ge=1)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    w_dice: float = 1.0
    w_bce: float = 1.0
    seed: int = 0
    fraction: float = Field(1.0, gt=0, le=1)
    clip_norm: float | None = 1.0
    augment: bool = True
    eval_every: int = Field(1, ge=1)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.model_dump())


class ExperimentSection(_Section):
    split_seed: int = 0
    seeds: tuple[int, ...] = (0, 1)
    fractions: tuple[float, ...] = (0.1, 0.3)
    ranks: tuple[int, ...] = (2, 4, 8, 16)
    variants: tuple[VariantKind, ...] = tuple(VariantKind)
    tau: float | None = Field(None, gt=0, description="NSD tolerance in mm; default min voxel spacing")
    taps: tuple[str, ...] = TAPS
    predictions: str | None = Field(None, description="eval: manifest of predicted masks (case_id, mask)")
    checkpoint: str | None = Field(None, description="eval/export-activations: trained checkpoint directory")
    runs: tuple[str, ...] = Field((), description="report: run directories to aggregate")

    @field_validator("taps")
    @classmethod
    def _known_taps(cls, v):
        bad = [t for t in v if t not in TAPS]
        if bad:
            raise ValueError(f"unknown taps {bad}; allowed {list(TAPS)}")
        return v


class RunConfig(_Section):
    data: DataSection = DataSection()
    model: ModelSection = ModelSection()
    insert: InsertSection = InsertSection()
    train: TrainSection = TrainSection()
    experiment: ExperimentSection = ExperimentSection()

    def with_seed(self, seed: int) -> RunConfig:
        """Override every seed that drives a run."""
        return self.model_copy(update={
            "data": self.data.model_copy(update={"seed": seed}),
            "train": self.train.model_copy(update={"seed": seed}),
            "experiment": self.experiment.model_copy(update={"split_seed": seed}),
        })

    def model_spec(self, variant: VariantKind | str | None = None) -> ModelSpec:
        kind = VariantKind(variant or self.model.variant)
        return build_variant(kind, self.model.vit(), self.insert.frozen_block(), self.model.target_params)

    def resolved(self) -> dict:
        return self.model_dump(mode="json")


def load_config(path: str | os.PathLike | None) -> RunConfig:
    """Parse and validate; ``None`` gives all defaults."""
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: cannot read config ({exc})") from exc
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"{path}: invalid config\n{exc}") from exc
