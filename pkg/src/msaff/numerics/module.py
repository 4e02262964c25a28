"""Parameter containers.

A ``Module`` owns leaf tensors (``requires_grad=True``) and child modules as
plain attributes; ``named_parameters`` walks them in attribute order, so names
are stable across runs and match checkpoint keys.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor


class Module:
    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            yield from _walk(value, f"{prefix}{name}")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        if strict:
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            if missing or extra:
                raise ShapeError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, value in state.items():
            if name not in params:
                continue
            arr = np.asarray(value, dtype=np.float64)
            if arr.shape != params[name].shape:
                raise ShapeError(f"parameter {name}: checkpoint shape {arr.shape} != model shape {params[name].shape}")
            params[name].data = arr.copy()


def _walk(value, name: str) -> Iterator[tuple[str, Tensor]]:
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    """Kaiming-normal leaf: N(0, 2 / fan_in)."""
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True)


def xavier_normal(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> Tensor:
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=shape), requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)
