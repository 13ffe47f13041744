from __future__ import annotations

from collections.abc import Iterator, Mapping

import numpy as np

from .init import truncated_normal
from .tensor import Parameter, get_dtype


class Module:
    """Container that discovers parameters and submodules through its attributes.

    Parameter names are full dotted paths fixed at construction, so they double
    as the initialization key and the snapshot record name.
    """

    def children(self) -> Iterator[Module]:
        for value in vars(self).values():
            if isinstance(value, Module):
                yield value
            elif isinstance(value, (list, tuple)):
                yield from (v for v in value if isinstance(v, Module))

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        seen: set[int] = set()
        self._collect(out, seen)
        return out

    def _collect(self, out: list[Parameter], seen: set[int]) -> None:
        for value in vars(self).values():
            items = value if isinstance(value, (list, tuple)) else (value,)
            for v in items:
                if isinstance(v, Parameter) and id(v) not in seen:
                    seen.add(id(v))
                    out.append(v)
                elif isinstance(v, Module):
                    v._collect(out, seen)

    def named_parameters(self) -> dict[str, Parameter]:
        named: dict[str, Parameter] = {}
        for p in self.parameters():
            if p.name in named:
                raise ValueError(f"duplicate parameter name {p.name!r}")
            named[p.name] = p
        return named

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray], strict: bool = True) -> None:
        named = self.named_parameters()
        if strict:
            missing = sorted(set(named) - set(state))
            extra = sorted(set(state) - set(named))
            if missing or extra:
                raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, arr in state.items():
            if name not in named:
                continue
            p = named[name]
            arr = np.asarray(arr)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: expected shape {p.shape}, found {arr.shape}")
            p.data = np.ascontiguousarray(arr, dtype=p.dtype)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def weight(name: str, shape, seed: int, trainable: bool = True) -> Parameter:
    dt = get_dtype()
    return Parameter(truncated_normal(name, shape, seed, dtype=dt), name, trainable)


def zeros(name: str, shape, trainable: bool = True) -> Parameter:
    return Parameter(np.zeros(shape, dtype=get_dtype()), name, trainable)


def ones(name: str, shape, trainable: bool = True) -> Parameter:
    return Parameter(np.ones(shape, dtype=get_dtype()), name, trainable)
