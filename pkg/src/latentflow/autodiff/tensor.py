"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every primitive records its parents and a closure that maps the output
gradient onto the parents' gradients. Nothing is recorded when no input
requires a gradient, so inference through the same code path stays cheap.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Raised when a primitive receives operands with incompatible shapes."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op})"

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf on the graph."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(
                    f"backward: implicit gradient needs a scalar output, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        order = topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every node after all of its inputs.

    Each node appears once. Iterative so deep graphs (long ODE rollouts)
    do not hit the recursion limit.
    """
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise binary ---------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)

    def backward(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(a.data**p, (a,), backward, "pow")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


# -- linear algebra -------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward, "matmul")


# -- activations / unary --------------------------------------------------
def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def elu(a) -> Tensor:
    """ELU with alpha = 1: x for x > 0, exp(x) - 1 otherwise."""
    a = as_tensor(a)
    mask = a.data > 0
    neg_part = np.expm1(np.minimum(a.data, 0.0))
    out = np.where(mask, a.data, neg_part)

    def backward(g):
        return (g * np.where(mask, 1.0, neg_part + 1.0),)

    return _make(out, (a,), backward, "elu")


def gelu(a) -> Tensor:
    """Exact GELU: x * Phi(x) with Phi(x) = 0.5 * (1 + erf(x / sqrt(2))).

    Derivative is Phi(x) + x * phi(x), phi the standard normal density.
    """
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _make(x * cdf, (a,), backward, "gelu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


# -- reductions -----------------------------------------------------------
def _expand(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (np.array(_expand(g, a.shape, axis, keepdims)),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))

    def backward(g):
        return (np.array(_expand(g, a.shape, axis, keepdims)) / count,)

    return _make(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), backward, "mean")


def mse(pred, target) -> Tensor:
    """Mean over all elements of (pred - target)^2."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shapes differ, {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def backward(g):
        gd = 2.0 * g * diff / n
        return gd, -gd

    return _make(np.asarray(np.mean(diff * diff)), (pred, target), backward, "mse")


# -- structural -----------------------------------------------------------
def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int)) or p is Ellipsis or p is None for p in parts)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g  # basic indexing never aliases an element twice
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(a.data[index]), (a,), backward, "getitem")


def take_rows(table, idx: np.ndarray) -> Tensor:
    """Embedding lookup: rows ``idx`` of a 2-D ``table``."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"take_rows: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"take_rows: index out of range for table with {table.shape[0]} rows")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(table.data[idx], (table,), backward, "take_rows")


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        shapes = [t.shape for t in ts]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, ts, backward, "concat")
