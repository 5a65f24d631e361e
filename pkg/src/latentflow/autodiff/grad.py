from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import ShapeError, Tensor


def forward_backward(
    loss_fn: Callable[[], Tensor], params: Sequence[Tensor]
) -> tuple[float, list[np.ndarray]]:
    """Evaluate ``loss_fn()`` and return its value with one gradient per parameter.

    Parameters that the loss does not depend on get a zero gradient.
    """
    for p in params:
        if not p.requires_grad:
            raise ValueError("forward_backward: every parameter must have requires_grad=True")
        p.grad = None
    loss = loss_fn()
    if loss.size != 1:
        raise ShapeError(f"forward_backward: loss must be scalar, got shape {loss.shape}")
    value = loss.item()
    loss.backward()
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
    for p in params:
        p.grad = None
    return value, grads


def numerical_gradient(
    fn: Callable[[np.ndarray], float], point: np.ndarray, step: float = 1e-5
) -> np.ndarray:
    """Central finite differences of a scalar function of an array."""
    point = np.array(point, dtype=np.float64)
    grad = np.zeros_like(point)
    flat = point.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(point)
        flat[i] = orig - step
        lo = fn(point)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def grad_check(
    fn: Callable[[Tensor], Tensor], point, step: float = 1e-5
) -> float:
    """Max over coordinates of |autodiff - central difference| / (|central difference| + 1e-12)."""
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    point = np.array(point, dtype=np.float64)

    def scalar(arr: np.ndarray) -> float:
        out = fn(Tensor(arr))
        if out.size != 1:
            raise ShapeError(f"grad_check: function output has shape {out.shape}, expected scalar")
        return out.item()

    x = Tensor(point.copy(), requires_grad=True)
    out = fn(x)
    if out.size != 1:
        raise ShapeError(f"grad_check: function output has shape {out.shape}, expected scalar")
    out.backward()
    analytic = np.zeros_like(point) if x.grad is None else x.grad
    numeric = numerical_gradient(scalar, point, step)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-12)))
