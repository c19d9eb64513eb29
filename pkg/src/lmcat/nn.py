"""Parameter containers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor, parameter


class Module:
    """Attribute-ordered parameter tree.

    Parameters are discovered by walking instance attributes in definition
    order, so ``named_parameters`` is deterministic for a given constructor.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


def init_normal(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64, name=None, gain: float = 1.0) -> Tensor:
    std = gain / np.sqrt(fan_in)
    return parameter((rng.standard_normal(shape) * std).astype(dtype), name=name)


def ones(shape, dtype=np.float64, name=None) -> Tensor:
    return parameter(np.ones(shape, dtype=dtype), name=name)


def zeros(shape, dtype=np.float64, name=None) -> Tensor:
    return parameter(np.zeros(shape, dtype=dtype), name=name)
