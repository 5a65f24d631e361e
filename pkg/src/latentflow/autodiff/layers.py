"""Parameter containers and the dense layers used by every model."""

from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": T.relu,
    "elu": T.elu,
    "gelu": T.gelu,
    "tanh": T.tanh,
}


class Module:
    """Anything holding named parameters, possibly nested in child modules."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"parameter names differ: missing={missing} unexpected={extra}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.copy()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, zero: bool = False):
        if zero:
            w = np.zeros((in_dim, out_dim))
        else:
            # He-uniform style bound, works well for ReLU/ELU/GELU trunks
            bound = np.sqrt(6.0 / in_dim) / np.sqrt(2.0)
            w = rng.uniform(-bound, bound, size=(in_dim, out_dim))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class MLP(Module):
    """Stack of Linear layers with one activation between consecutive layers."""

    def __init__(
        self,
        sizes: list[int],
        rng: np.random.Generator,
        activation: str = "relu",
        zero_last: bool = False,
    ):
        if len(sizes) < 2:
            raise ValueError("MLP needs at least input and output sizes")
        self.activation = activation
        self.layers = [
            Linear(a, b, rng, zero=zero_last and i == len(sizes) - 2)
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]

    def __call__(self, x: Tensor) -> Tensor:
        act = ACTIVATIONS[self.activation]
        for layer in self.layers[:-1]:
            x = act(layer(x))
        return self.layers[-1](x)
