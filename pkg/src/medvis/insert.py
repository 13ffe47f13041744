"""Frozen transformer block inserted between encoder and decoder.

The branch ``mapper_out(frozen_block(mapper_in(P)))`` is added back onto P.
Both mappers are trainable low-rank products; the block's base weights are
frozen and may carry LoRA adapters on selected linear sub-layers. With the
output mapper's B and all LoRA B matrices at zero the branch is exactly zero,
so a freshly built model reproduces the plain ViT bit for bit.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .layers import LORA_TARGETS, Linear, TransformerBlock, block_param_count
from .numerics import Module, ShapeError, Tensor, ops, snapshot
from .numerics.module import weight, zeros

BLOCK_PREFIX = "insert.block"


@dataclass(frozen=True)
class FrozenBlockConfig:
    dim: int = 128
    heads: int = 4
    mlp_hidden: int = 512
    source: str = "seeded-random"  # or "snapshot"
    weight_seed: int = 1234
    snapshot_path: str | None = None
    lora_targets: tuple[str, ...] = ("query", "value")
    rank: int = 4
    alpha: float | None = None  # defaults to rank, i.e. unit scale
    mapper_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "lora_targets", tuple(self.lora_targets))
        if self.dim % self.heads:
            raise ValueError(f"frozen block dim {self.dim} not divisible by heads {self.heads}")
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        bad = [t for t in self.lora_targets if t not in LORA_TARGETS]
        if bad:
            raise ValueError(f"unknown LoRA targets {bad}; allowed {LORA_TARGETS}")
        if self.source not in ("seeded-random", "snapshot"):
            raise ValueError(f"unknown weight source {self.source!r}")
        if self.source == "snapshot" and not self.snapshot_path:
            raise ValueError("snapshot source requires snapshot_path")

    @property
    def lora_alpha(self) -> float:
        return float(self.rank if self.alpha is None else self.alpha)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lora_targets"] = list(self.lora_targets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> FrozenBlockConfig:
        return cls(**d)


class Mapper(Module):
    """Low-rank dimension map ``y = B·(A·x) + bias`` with A (r × in), B (out × r)."""

    def __init__(self, prefix: str, in_dim: int, out_dim: int, rank: int, seed: int,
                 bias: bool = True, zero_out: bool = False):
        self.in_dim, self.out_dim, self.rank = in_dim, out_dim, rank
        self.A = weight(f"{prefix}.A", (rank, in_dim), seed)
        if zero_out:
            self.B = zeros(f"{prefix}.B", (out_dim, rank))
        else:
            self.B = weight(f"{prefix}.B", (out_dim, rank), seed)
        self.bias = zeros(f"{prefix}.bias", (out_dim,)) if bias else None
        self.prefix = prefix

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"mapper[{self.prefix}]", x.shape, self.A.shape)
        y = ops.matmul(ops.matmul(x, ops.transpose(self.A)), ops.transpose(self.B))
        if self.bias is not None:
            y = ops.add(y, self.bias)
        return y

    def matrix(self) -> np.ndarray:
        return self.B.data @ self.A.data


def mapper_forward(tokens: Tensor, mapper: Mapper) -> Tensor:
    return mapper(tokens)


def lora_linear_forward(x: Tensor, layer: Linear) -> Tensor:
    """``x·W (+ b) + (alpha/r)·B·(A·x)``; W is frozen, only A and B learn."""
    return layer(x)


class FullMapper(Module):
    """Dense trainable projection, used by the linear-projection variant."""

    def __init__(self, prefix: str, in_dim: int, out_dim: int, seed: int, zero_out: bool = False):
        self.linear = Linear(prefix, in_dim, out_dim, seed)
        if zero_out:
            self.linear.weight.data[...] = 0.0

    def __call__(self, x: Tensor) -> Tensor:
        return self.linear(x)


def build_frozen_block(cfg: FrozenBlockConfig, lora: bool = True, seed: int = 0) -> TransformerBlock:
    """Frozen block with base weights from ``cfg``; LoRA adapters use the run ``seed``."""
    blk = TransformerBlock(BLOCK_PREFIX, cfg.dim, cfg.heads, cfg.mlp_hidden, cfg.weight_seed,
                           bias=False, trainable=False)
    if cfg.source == "snapshot":
        load_block_snapshot(blk, cfg.snapshot_path)
    if lora:
        for target in cfg.lora_targets:
            blk.linear_for(target).attach_lora(cfg.rank, cfg.lora_alpha, seed)
    return blk


def _base_params(blk: TransformerBlock) -> dict[str, np.ndarray]:
    return {
        p.name[len(BLOCK_PREFIX) + 1:]: p
        for p in blk.parameters()
        if not p.trainable
    }


def save_block_snapshot(blk: TransformerBlock, path: str | os.PathLike) -> str:
    return snapshot.save(path, {k: p.data for k, p in _base_params(blk).items()})


def load_block_snapshot(blk: TransformerBlock, path: str | os.PathLike) -> None:
    arrays = snapshot.load(path)
    expected = {k: p.shape for k, p in _base_params(blk).items()}
    found = {k: tuple(a.shape) for k, a in arrays.items()}
    if expected != found:
        diffs = [
            f"{k}: expected {expected.get(k)} found {found.get(k)}"
            for k in sorted(set(expected) | set(found))
            if expected.get(k) != found.get(k)
        ]
        raise ValueError("frozen-block snapshot does not match config: " + "; ".join(diffs))
    params = _base_params(blk)
    for k, arr in arrays.items():
        params[k].data = np.ascontiguousarray(arr, dtype=params[k].dtype)


def weight_source_id(cfg: FrozenBlockConfig) -> str:
    if cfg.source == "snapshot":
        return "sha256:" + snapshot.file_hash(cfg.snapshot_path)
    h = hashlib.sha256(f"seeded-random:{cfg.weight_seed}:{cfg.dim}:{cfg.heads}:{cfg.mlp_hidden}".encode())
    return f"seed:{cfg.weight_seed}:" + h.hexdigest()[:16]


def load_frozen_weights(cfg: FrozenBlockConfig, seed: int = 0, lora: bool = True) -> TransformerBlock:
    return build_frozen_block(cfg, lora=lora, seed=seed)


class LLMInsert(Module):
    """Q = P + mapper_out(block(mapper_in(P)))."""

    def __init__(self, d_v: int, cfg: FrozenBlockConfig, seed: int, mode: str = "lora"):
        if mode not in ("lora", "linear"):
            raise ValueError(f"unknown insert mode {mode!r}")
        self.cfg = cfg
        self.mode = mode
        self.d_v = d_v
        if mode == "lora":
            self.mapper_in = Mapper("insert.mapper_in", d_v, cfg.dim, cfg.rank, seed, cfg.mapper_bias)
            self.mapper_out = Mapper("insert.mapper_out", cfg.dim, d_v, cfg.rank, seed, cfg.mapper_bias,
                                     zero_out=True)
        else:
            self.mapper_in = FullMapper("insert.mapper_in", d_v, cfg.dim, seed)
            self.mapper_out = FullMapper("insert.mapper_out", cfg.dim, d_v, seed, zero_out=True)
        self.block = build_frozen_block(cfg, lora=(mode == "lora"), seed=seed)
        self.taps: dict[str, np.ndarray] | None = None

    def branch(self, p: Tensor) -> Tensor:
        h = self.mapper_in(p)
        z = self.block(h)
        out = self.mapper_out(z)
        if self.taps is not None:
            self.taps["mapper1_out"] = h.data.copy()
            self.taps["mapper2_out"] = out.data.copy()
        return out

    def __call__(self, p: Tensor) -> Tensor:
        if p.shape[-1] != self.d_v:
            raise ShapeError("insert", p.shape, (self.d_v,))
        return ops.add(p, self.branch(p))


def insert_forward(p: Tensor, insert: LLMInsert) -> Tensor:
    return insert(p)


@dataclass
class FreezeReport:
    trainable: dict[str, int] = field(default_factory=dict)
    frozen: dict[str, int] = field(default_factory=dict)

    @property
    def trainable_count(self) -> int:
        return sum(self.trainable.values())

    @property
    def frozen_count(self) -> int:
        return sum(self.frozen.values())

    @property
    def total(self) -> int:
        return self.trainable_count + self.frozen_count


def freeze_audit(model: Module) -> FreezeReport:
    """Partition parameters by trainability and check the frozen set.

    The frozen set must be exactly the base weights of the inserted block:
    every frozen name lives under the block prefix and is not a LoRA factor,
    and every such base weight is frozen.
    """
    rep = FreezeReport()
    for name, p in model.named_parameters().items():
        (rep.trainable if p.trainable else rep.frozen)[name] = p.data.size
        is_base = name.startswith(BLOCK_PREFIX + ".") and ".lora_" not in name
        if is_base == p.trainable:
            raise AssertionError(f"freeze audit failed at {name}: trainable={p.trainable}")
    return rep


def lora_param_count(cfg: FrozenBlockConfig) -> int:
    dims = lora_target_dims(cfg)
    return sum(cfg.rank * (i + o) for i, o in dims)


def lora_target_dims(cfg: FrozenBlockConfig) -> list[tuple[int, int]]:
    d, h = cfg.dim, cfg.mlp_hidden
    table = {"query": (d, d), "key": (d, d), "value": (d, d), "output": (d, d),
             "mlp-in": (d, h), "mlp-out": (h, d)}
    return [table[t] for t in cfg.lora_targets]


def insert_param_counts(d_v: int, cfg: FrozenBlockConfig, mode: str = "lora") -> tuple[int, int]:
    """(trainable, frozen) parameter counts of the insert, closed form."""
    frozen = block_param_count(cfg.dim, cfg.mlp_hidden, bias=False)
    if mode == "linear":
        return (d_v * cfg.dim + cfg.dim) + (cfg.dim * d_v + d_v), frozen
    b = 1 if cfg.mapper_bias else 0
    mappers = 2 * cfg.rank * (d_v + cfg.dim) + b * (cfg.dim + d_v)
    return mappers + lora_param_count(cfg), frozen
