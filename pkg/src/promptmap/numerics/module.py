"""Parameter containers: a minimal module tree with dotted parameter names."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from ..errors import DimensionError, ValidationError
from .tensor import Tensor, get_default_dtype


def parameter(values: np.ndarray, requires_grad: bool = True) -> Tensor:
    return Tensor(np.array(values, dtype=get_default_dtype()), requires_grad=requires_grad)


def shape_only(shape: tuple[int, ...]) -> Tensor:
    """A zero-memory stand-in for a parameter; used for parameter census at scale."""
    return Tensor(np.broadcast_to(np.zeros((), dtype=get_default_dtype()), shape), requires_grad=True)


def uniform_fan_in(rng: np.random.Generator | None, shape: tuple[int, ...], fan_in: int | None = None) -> Tensor:
    """U(-1/sqrt(fan_in), 1/sqrt(fan_in)); fan_in defaults to shape[0]."""
    if rng is None:
        return shape_only(shape)
    bound = 1.0 / np.sqrt(fan_in if fan_in is not None else shape[0])
    return parameter(rng.uniform(-bound, bound, size=shape))


def zeros(rng: np.random.Generator | None, shape: tuple[int, ...]) -> Tensor:
    return shape_only(shape) if rng is None else parameter(np.zeros(shape))


def ones(rng: np.random.Generator | None, shape: tuple[int, ...]) -> Tensor:
    return shape_only(shape) if rng is None else parameter(np.ones(shape))


class Module:
    """Tree of named tensors.

    Any public attribute holding a Tensor, a Module, or a list/dict of those
    is part of the tree; names are the dotted attribute path.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            yield from _walk(value, prefix + name)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise ValidationError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, values in state.items():
            if name not in own:
                continue
            p = own[name]
            if tuple(values.shape) != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {tuple(values.shape)} != model shape {p.shape}")
            p.data = np.array(values, dtype=p.dtype)
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _walk(value, name: str) -> Iterator[tuple[str, Tensor]]:
    if isinstance(value, Tensor):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")
    elif isinstance(value, dict):
        for key, item in value.items():
            yield from _walk(item, f"{name}.{key}")
