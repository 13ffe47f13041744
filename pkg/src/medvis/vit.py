"""Base ViT segmentation pipeline: patchify, embed, encode, decode, depatchify."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .layers import Linear, TransformerBlock, block_param_count
from .numerics import Module, ShapeError, Tensor, ops
from .numerics.module import weight


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(x) for x in v)
    if len(v) != 3:
        raise ValueError(f"expected 3 extents, got {v}")
    return v


@dataclass(frozen=True)
class ViTConfig:
    image_size: tuple[int, int, int] = (32, 32, 32)
    patch_size: tuple[int, int, int] = (4, 4, 4)
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0
    decoder_depth: int = 1

    def __post_init__(self):
        object.__setattr__(self, "image_size", _triple(self.image_size))
        object.__setattr__(self, "patch_size", _triple(self.patch_size))
        for axis, (n, p) in enumerate(zip(self.image_size, self.patch_size)):
            if p < 1 or n % p:
                raise ValueError(f"axis {axis}: image extent {n} not divisible by patch extent {p}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.depth < 0 or self.decoder_depth < 0:
            raise ValueError("depths must be >= 0")

    @property
    def grid(self) -> tuple[int, int, int]:
        return tuple(n // p for n, p in zip(self.image_size, self.patch_size))

    @property
    def num_tokens(self) -> int:
        g = self.grid
        return g[0] * g[1] * g[2]

    @property
    def patch_voxels(self) -> int:
        p = self.patch_size
        return p[0] * p[1] * p[2]

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["patch_size"] = list(self.patch_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ViTConfig:
        return cls(**d)


@dataclass
class TokenSequence:
    tokens: np.ndarray  # (..., T, dim)
    grid: tuple[int, int, int]

    def __post_init__(self):
        g = self.grid
        if self.tokens.shape[-2] != g[0] * g[1] * g[2]:
            raise ShapeError("TokenSequence", self.tokens.shape, tuple(g), detail="T != grid product")

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]

    @property
    def count(self) -> int:
        return self.tokens.shape[-2]


def patchify(volume: np.ndarray, patch_size) -> TokenSequence:
    """Split (..., D, H, W) into non-overlapping blocks, one token per block.

    Tokens are ordered lexicographically by block index (i, j, k); each token
    lists its block's voxels in row-major order.
    """
    volume = np.asarray(volume)
    pd, ph, pw = _triple(patch_size)
    *lead, d, h, w = volume.shape
    for axis, (n, p) in enumerate(zip((d, h, w), (pd, ph, pw))):
        if n % p:
            raise ShapeError("patchify", (d, h, w), (pd, ph, pw), detail=f"axis {axis} not divisible")
    gd, gh, gw = d // pd, h // ph, w // pw
    n = len(lead)
    x = volume.reshape(*lead, gd, pd, gh, ph, gw, pw)
    x = x.transpose(*range(n), n, n + 2, n + 4, n + 1, n + 3, n + 5)
    return TokenSequence(np.ascontiguousarray(x.reshape(*lead, gd * gh * gw, pd * ph * pw)), (gd, gh, gw))


def depatchify(tokens, grid, patch_size):
    """Inverse of ``patchify``. Differentiable when given a Tensor."""
    gd, gh, gw = _triple(grid)
    pd, ph, pw = _triple(patch_size)
    if isinstance(tokens, TokenSequence):
        tokens = tokens.tokens
    *lead, t, pv = tokens.shape
    if t != gd * gh * gw or pv != pd * ph * pw:
        raise ShapeError("depatchify", tokens.shape, (gd * gh * gw, pd * ph * pw))
    n = len(lead)
    perm = (*range(n), n, n + 3, n + 1, n + 4, n + 2, n + 5)
    out_shape = (*lead, gd * pd, gh * ph, gw * pw)
    if isinstance(tokens, Tensor):
        x = ops.reshape(tokens, (*lead, gd, gh, gw, pd, ph, pw))
        return ops.reshape(ops.transpose(x, perm), out_shape)
    x = np.asarray(tokens).reshape(*lead, gd, gh, gw, pd, ph, pw)
    return np.ascontiguousarray(x.transpose(perm).reshape(out_shape))


class PatchEmbedding(Module):
    """token · W + b + pos, with a learned absolute positional table."""

    def __init__(self, cfg: ViTConfig, seed: int, prefix: str = "embed"):
        self.proj = Linear(f"{prefix}.proj", cfg.patch_voxels, cfg.embed_dim, seed)
        self.pos = weight(f"{prefix}.pos", (cfg.num_tokens, cfg.embed_dim), seed)

    def __call__(self, raw: Tensor) -> Tensor:
        if raw.shape[-2] != self.pos.shape[0]:
            raise ShapeError("embed", raw.shape, self.pos.shape, detail="token count vs positional table")
        return ops.add(self.proj(raw), self.pos)


class Encoder(Module):
    def __init__(self, cfg: ViTConfig, seed: int, prefix: str = "encoder"):
        self.blocks = [
            TransformerBlock(f"{prefix}.{i}", cfg.embed_dim, cfg.heads, cfg.mlp_hidden, seed)
            for i in range(cfg.depth)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk(x)
        return x


class Decoder(Module):
    """Transformer blocks, a per-token linear head to patch voxels, then depatchify."""

    def __init__(self, cfg: ViTConfig, seed: int, prefix: str = "decoder"):
        self.cfg = cfg
        self.blocks = [
            TransformerBlock(f"{prefix}.{i}", cfg.embed_dim, cfg.heads, cfg.mlp_hidden, seed)
            for i in range(cfg.decoder_depth)
        ]
        self.head = Linear(f"{prefix}.head", cfg.embed_dim, cfg.patch_voxels, seed)

    def __call__(self, q: Tensor) -> Tensor:
        if q.shape[-2] != self.cfg.num_tokens:
            raise ShapeError("decoder", q.shape, self.cfg.grid, detail="token count vs grid")
        for blk in self.blocks:
            q = blk(q)
        return depatchify(self.head(q), self.cfg.grid, self.cfg.patch_size)


def vit_param_count(cfg: ViTConfig) -> int:
    d, pv, t = cfg.embed_dim, cfg.patch_voxels, cfg.num_tokens
    embed = pv * d + d + t * d
    blocks = (cfg.depth + cfg.decoder_depth) * block_param_count(d, cfg.mlp_hidden)
    head = d * pv + pv
    return embed + blocks + head

