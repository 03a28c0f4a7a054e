"""Parameter containers and the small set of layers the model needs."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import numerics as nx
from .numerics import Parameter, Tensor


class Module:
    """Ordered registry of parameters and child modules.

    Attribute assignment of a ``Parameter`` or ``Module`` registers it, so
    ``named_parameters`` yields names in definition order.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def name_parameters(self) -> None:
        """Stamp each parameter with its fully qualified name."""
        for name, p in self.named_parameters():
            p.name = name

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        super().__init__()
        limit = math.sqrt(6.0 / (d_in + d_out))
        self.weight = Parameter(rng.uniform(-limit, limit, size=(d_in, d_out)))
        self.bias = Parameter(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return nx.add(nx.matmul(x, self.weight), self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator):
        super().__init__()
        if k not in (1, 3):
            raise ValueError(f"kernel size must be 1 or 3, got {k}")
        std = math.sqrt(2.0 / (c_in * k * k))
        self.weight = Parameter(rng.normal(0.0, std, size=(c_out, c_in, k, k)))
        self.bias = Parameter(np.zeros(c_out))
        self.padding = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return nx.conv2d(x, self.weight, self.bias, self.padding)


class LayerNorm(Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return nx.layer_norm(x, self.gamma, self.beta)
