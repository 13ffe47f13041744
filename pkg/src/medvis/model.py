"""Full segmentation models and the serializable ModelSpec they are built from."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .insert import FrozenBlockConfig, LLMInsert, insert_param_counts
from .layers import Linear
from .numerics import Module, Tensor, as_tensor, ops
from .vit import Decoder, Encoder, PatchEmbedding, ViTConfig, patchify, vit_param_count

BRIDGES = ("none", "llama-lora", "llama-linear", "mlp")


@dataclass(frozen=True)
class ModelSpec:
    vit: ViTConfig = ViTConfig()
    bridge: str = "none"
    insert: FrozenBlockConfig | None = None
    mlp_width: int = 0
    name: str = "vit-baseline"

    def __post_init__(self):
        if self.bridge not in BRIDGES:
            raise ValueError(f"unknown bridge {self.bridge!r}")
        if self.bridge.startswith("llama") and self.insert is None:
            raise ValueError(f"bridge {self.bridge} needs an insert config")
        if self.bridge == "mlp" and self.mlp_width < 1:
            raise ValueError("mlp bridge needs mlp_width >= 1")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "vit": self.vit.to_dict(),
            "bridge": self.bridge,
            "insert": self.insert.to_dict() if self.insert else None,
            "mlp_width": self.mlp_width,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ModelSpec:
        return cls(
            vit=ViTConfig.from_dict(d["vit"]),
            bridge=d["bridge"],
            insert=FrozenBlockConfig.from_dict(d["insert"]) if d.get("insert") else None,
            mlp_width=d.get("mlp_width", 0),
            name=d.get("name", d["bridge"]),
        )


class MLPBridge(Module):
    """Wide two-layer MLP on the latent tokens, added residually."""

    def __init__(self, dim: int, width: int, seed: int):
        self.fc1 = Linear("bridge_mlp.fc1", dim, width, seed)
        self.fc2 = Linear("bridge_mlp.fc2", width, dim, seed)

    def __call__(self, p: Tensor) -> Tensor:
        return ops.add(p, self.fc2(ops.gelu(self.fc1(p))))


class SegmentationModel(Module):
    """embed → encoder → [bridge] → decoder; maps (B, D, H, W) volumes to logits."""

    def __init__(self, spec: ModelSpec, seed: int = 0):
        self.spec = spec
        self.seed = seed
        cfg = spec.vit
        self.embed = PatchEmbedding(cfg, seed)
        self.encoder = Encoder(cfg, seed)
        self.bridge: Module | None = None
        if spec.bridge == "llama-lora":
            self.bridge = LLMInsert(cfg.embed_dim, spec.insert, seed, mode="lora")
        elif spec.bridge == "llama-linear":
            self.bridge = LLMInsert(cfg.embed_dim, spec.insert, seed, mode="linear")
        elif spec.bridge == "mlp":
            self.bridge = MLPBridge(cfg.embed_dim, spec.mlp_width, seed)
        self.decoder = Decoder(cfg, seed)
        self.taps: dict[str, np.ndarray] | None = None

    def tokens(self, volumes) -> Tensor:
        vol = volumes.data if isinstance(volumes, Tensor) else np.asarray(volumes)
        if vol.ndim == 3:
            vol = vol[None]
        return as_tensor(patchify(vol, self.spec.vit.patch_size).tokens)

    def encode(self, raw: Tensor) -> Tensor:
        return self.encoder(self.embed(raw))

    def __call__(self, volumes) -> Tensor:
        """Logit volume with the input's (B, D, H, W) shape."""
        p = self.encode(self.tokens(volumes))
        q = self.bridge(p) if self.bridge is not None else p
        if self.taps is not None:
            self.taps["encoder_out"] = p.data.copy()
            self.taps["decoder_in"] = q.data.copy()
        return self.decoder(q)


def build_model(spec: ModelSpec, seed: int = 0) -> SegmentationModel:
    return SegmentationModel(spec, seed)


def count_parameters(spec: ModelSpec) -> tuple[int, int, int]:
    """(trainable, frozen, total), closed form."""
    trainable = vit_param_count(spec.vit)
    frozen = 0
    if spec.bridge == "llama-lora":
        t, f = insert_param_counts(spec.vit.embed_dim, spec.insert, "lora")
        trainable += t
        frozen += f
    elif spec.bridge == "llama-linear":
        t, f = insert_param_counts(spec.vit.embed_dim, spec.insert, "linear")
        trainable += t
        frozen += f
    elif spec.bridge == "mlp":
        d, w = spec.vit.embed_dim, spec.mlp_width
        trainable += d * w + w + w * d + d
    return trainable, frozen, trainable + frozen


def enumerate_parameters(model: Module) -> tuple[int, int, int]:
    """(trainable, frozen, total) by walking an instantiated model."""
    t = sum(p.data.size for p in model.parameters() if p.trainable)
    f = sum(p.data.size for p in model.parameters() if not p.trainable)
    return t, f, t + f
