"""Transformer building blocks shared by the ViT and the frozen insert block.

Tokens are row vectors: a linear layer computes ``x @ W + b`` with ``W`` of
shape (in, out).
"""

from __future__ import annotations

import math

import numpy as np

from .numerics import Module, ShapeError, Tensor, ops
from .numerics.module import ones, weight, zeros

LORA_TARGETS = ("query", "key", "value", "output", "mlp-in", "mlp-out")


class LoRAAdapter(Module):
    """Low-rank delta ``(alpha / r) · B · A`` with A (r × in) and B (out × r).

    B starts at zero, so a fresh adapter contributes exactly nothing.
    """

    def __init__(self, prefix: str, in_dim: int, out_dim: int, rank: int, alpha: float, seed: int):
        if rank < 1:
            raise ValueError(f"LoRA rank must be >= 1, got {rank}")
        self.rank = rank
        self.alpha = float(alpha)
        self.A = weight(f"{prefix}.lora_A", (rank, in_dim), seed)
        self.B = zeros(f"{prefix}.lora_B", (out_dim, rank))

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def __call__(self, x: Tensor) -> Tensor:
        h = ops.matmul(x, ops.transpose(self.A))
        return ops.mul(ops.matmul(h, ops.transpose(self.B)), self.scale)

    def delta(self) -> np.ndarray:
        return self.scale * (self.B.data @ self.A.data)


class Linear(Module):
    def __init__(
        self,
        prefix: str,
        in_dim: int,
        out_dim: int,
        seed: int,
        bias: bool = True,
        trainable: bool = True,
    ):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = weight(f"{prefix}.weight", (in_dim, out_dim), seed, trainable)
        self.bias = zeros(f"{prefix}.bias", (out_dim,), trainable) if bias else None
        self.lora: LoRAAdapter | None = None
        self.prefix = prefix

    def attach_lora(self, rank: int, alpha: float, seed: int) -> LoRAAdapter:
        self.lora = LoRAAdapter(self.prefix, self.in_dim, self.out_dim, rank, alpha, seed)
        return self.lora

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"linear[{self.prefix}]", x.shape, self.weight.shape)
        y = ops.matmul(x, self.weight)
        if self.bias is not None:
            y = ops.add(y, self.bias)
        if self.lora is not None:
            y = ops.add(y, self.lora(x))
        return y


class LayerNorm(Module):
    def __init__(self, prefix: str, dim: int, trainable: bool = True):
        self.scale = ones(f"{prefix}.scale", (dim,), trainable)
        self.shift = zeros(f"{prefix}.shift", (dim,), trainable)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.scale, self.shift)


def attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention over (..., T, dh); no mask, no rotary terms."""
    scores = ops.mul(ops.matmul(q, ops.transpose(k, _swap_last(k.ndim))), 1.0 / math.sqrt(q.shape[-1]))
    probs = ops.softmax(scores)
    return ops.matmul(probs, v), probs


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


class MultiHeadAttention(Module):
    def __init__(self, prefix: str, dim: int, heads: int, seed: int, bias: bool = True, trainable: bool = True):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.query = Linear(f"{prefix}.query", dim, dim, seed, bias, trainable)
        self.key = Linear(f"{prefix}.key", dim, dim, seed, bias, trainable)
        self.value = Linear(f"{prefix}.value", dim, dim, seed, bias, trainable)
        self.output = Linear(f"{prefix}.output", dim, dim, seed, bias, trainable)
        self.record = False
        self.last_attention: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        *lead, t, _ = x.shape
        x = ops.reshape(x, (*lead, t, self.heads, self.dim // self.heads))
        n = len(lead)
        return ops.transpose(x, (*range(n), n + 1, n, n + 2))

    def __call__(self, x: Tensor) -> Tensor:
        q, k, v = self._split(self.query(x)), self._split(self.key(x)), self._split(self.value(x))
        ctx, probs = attention(q, k, v)
        if self.record:
            self.last_attention = probs.data.copy()
        n = ctx.ndim - 3
        ctx = ops.transpose(ctx, (*range(n), n + 1, n, n + 2))
        ctx = ops.reshape(ctx, (*ctx.shape[:-2], self.dim))
        return self.output(ctx)


class MLP(Module):
    def __init__(self, prefix: str, dim: int, hidden: int, seed: int, bias: bool = True, trainable: bool = True):
        self.fc_in = Linear(f"{prefix}.fc_in", dim, hidden, seed, bias, trainable)
        self.fc_out = Linear(f"{prefix}.fc_out", hidden, dim, seed, bias, trainable)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc_out(ops.gelu(self.fc_in(x)))


class TransformerBlock(Module):
    """Pre-norm block: x + attn(norm(x)), then x + mlp(norm(x))."""

    def __init__(
        self,
        prefix: str,
        dim: int,
        heads: int,
        mlp_hidden: int,
        seed: int,
        bias: bool = True,
        trainable: bool = True,
    ):
        self.dim = dim
        self.norm1 = LayerNorm(f"{prefix}.norm1", dim, trainable)
        self.attn = MultiHeadAttention(f"{prefix}.attn", dim, heads, seed, bias, trainable)
        self.norm2 = LayerNorm(f"{prefix}.norm2", dim, trainable)
        self.mlp = MLP(f"{prefix}.mlp", dim, mlp_hidden, seed, bias, trainable)

    def linear_for(self, target: str) -> Linear:
        table = {
            "query": self.attn.query,
            "key": self.attn.key,
            "value": self.attn.value,
            "output": self.attn.output,
            "mlp-in": self.mlp.fc_in,
            "mlp-out": self.mlp.fc_out,
        }
        if target not in table:
            raise ValueError(f"unknown LoRA target {target!r}; expected one of {LORA_TARGETS}")
        return table[target]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.dim:
            raise ShapeError("transformer_block", x.shape, (self.dim,))
        x = ops.add(x, self.attn(self.norm1(x)))
        return ops.add(x, self.mlp(self.norm2(x)))


def block_param_count(dim: int, mlp_hidden: int, bias: bool = True) -> int:
    b = 1 if bias else 0
    attn = 4 * (dim * dim + b * dim)
    mlp = dim * mlp_hidden + b * mlp_hidden + mlp_hidden * dim + b * dim
    norms = 4 * dim
    return attn + mlp + norms
