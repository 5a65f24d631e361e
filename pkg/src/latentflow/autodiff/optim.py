from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **hyper) -> "AdamState":
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            **hyper,
        )


def adam_step(
    params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState
) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update. Returns new arrays; inputs are not mutated."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ShapeError(
            f"adam_step: got {len(params)} params, {len(grads)} grads, {len(state.m)} moment slots"
        )
    step = state.step + 1
    c1 = 1.0 - state.beta1**step
    c2 = 1.0 - state.beta2**step
    new_params, new_m, new_v = [], [], []
    for i, (p, g, m, v) in enumerate(zip(params, grads, state.m, state.v)):
        if not (p.shape == g.shape == m.shape == v.shape):
            raise ShapeError(
                f"adam_step: slot {i} shape mismatch param={p.shape} grad={g.shape} m={m.shape}"
            )
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        new_params.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    new_state = AdamState(
        lr=state.lr, beta1=state.beta1, beta2=state.beta2, eps=state.eps,
        step=step, m=new_m, v=new_v,
    )
    return new_params, new_state


class Adam:
    """Stateful wrapper applying :func:`adam_step` to live Tensor parameters."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState.for_params(
            [p.data for p in self.params], lr=lr, beta1=beta1, beta2=beta2, eps=eps
        )

    def step(self, grads: Sequence[np.ndarray]) -> None:
        new, self.state = adam_step([p.data for p in self.params], grads, self.state)
        for p, arr in zip(self.params, new):
            p.data = arr
