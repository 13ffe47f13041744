"""Analytic-vs-central-difference gradient verification."""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .module import Module
from .tensor import NonFiniteError, Parameter, Tensor

# absolute floor in the relative-error denominator, so an all-zero analytic
# gradient does not divide difference-quotient noise by zero
REL_FLOOR = 1e-6


@dataclass
class GradientReport:
    eps: float
    tol: float
    max_abs_error: dict[str, float] = field(default_factory=dict)
    max_rel_error: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(v <= self.tol for v in self.max_rel_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def __str__(self) -> str:
        lines = [f"gradcheck eps={self.eps:g} tol={self.tol:g} pass={self.passed}"]
        for name in self.max_rel_error:
            lines.append(
                f"  {name}: abs={self.max_abs_error[name]:.3e} rel={self.max_rel_error[name]:.3e}"
            )
        return "\n".join(lines)


def _params_of(fragment, params) -> list[Parameter]:
    if params is not None:
        return list(params)
    if isinstance(fragment, Module):
        return fragment.parameters()
    return []


def forward_backward(
    fragment: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    upstream=None,
    params: Sequence[Parameter] | None = None,
) -> tuple[Tensor, dict[str, np.ndarray]]:
    """Run ``fragment(*inputs)`` and backpropagate ``upstream`` (default: ones).

    Returns the output and gradients keyed by parameter name, plus ``input{i}``
    for every input tensor that requires grad. Frozen parameters never appear.
    """
    params = _params_of(fragment, params)
    for t in list(inputs) + params:
        t.grad = None
    out = fragment(*inputs)
    out.backward(upstream)
    grads: dict[str, np.ndarray] = {}
    for i, t in enumerate(inputs):
        if t.requires_grad and not isinstance(t, Parameter):
            grads[f"input{i}"] = t.grad if t.grad is not None else np.zeros_like(t.data)
    for p in params:
        if p.trainable:
            grads[p.name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return out, grads


def _scalarize(out: Tensor, proj: np.ndarray | None) -> Tensor:
    if out.data.size == 1:
        return ops.sum(out)
    return ops.sum(ops.mul(out, proj))


def finite_difference_check(
    fragment: Callable[..., Tensor],
    inputs: Sequence[Tensor] = (),
    eps: float = 1e-5,
    tol: float = 1e-4,
    params: Sequence[Parameter] | None = None,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradientReport:
    """Compare analytic gradients with ``(f(θ+eps) − f(θ−eps)) / (2·eps)``.

    Non-scalar outputs are reduced to a scalar with a fixed random projection
    (seeded), so symmetric cancellations cannot hide errors. Inputs that require
    grad are checked alongside trainable parameters. ``max_entries`` samples
    that many coordinates per tensor instead of checking all of them.

    Relative error of a tensor is ``max|a − n| / max(max|a|, max|n|, REL_FLOOR)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    params = _params_of(fragment, params)
    targets: list[tuple[str, Tensor]] = [
        (f"input{i}", t) for i, t in enumerate(inputs)
        if t.requires_grad and not isinstance(t, Parameter)
    ]
    targets += [(p.name, p) for p in params if p.trainable]
    for _, t in targets:
        if t.data.dtype != np.float64:
            raise TypeError("finite_difference_check requires 64-bit tensors")

    report = GradientReport(eps=eps, tol=tol)
    if not targets:
        return report

    rng = np.random.default_rng(seed)
    probe = fragment(*inputs)
    proj = None if probe.data.size == 1 else rng.standard_normal(probe.shape)

    def loss() -> float:
        value = float(_scalarize(fragment(*inputs), proj).data)
        if not np.isfinite(value):
            raise NonFiniteError("finite_difference_check: non-finite loss")
        return value

    _, grads = forward_backward(lambda *xs: _scalarize(fragment(*xs), proj), inputs, params=params)

    for name, t in targets:
        analytic = grads[name]
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        numeric = np.empty(idx.size)
        for j, k in enumerate(idx):
            orig = flat[k]
            flat[k] = orig + eps
            up = loss()
            flat[k] = orig - eps
            down = loss()
            flat[k] = orig
            numeric[j] = (up - down) / (2 * eps)
        a = analytic.reshape(-1)[idx]
        err = np.abs(a - numeric)
        scale = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0), REL_FLOOR)
        report.max_abs_error[name] = float(err.max(initial=0.0))
        report.max_rel_error[name] = float(err.max(initial=0.0) / scale)
    return report
