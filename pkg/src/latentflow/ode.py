"""Fixed-step explicit integration of dz/dt = f(z, t) in either time direction."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .csvio import fmt, write_csv
from .errors import NumericError
from .flow import Conditioning, FlowModel, guided_velocity, velocity

Field = Callable[[np.ndarray, float], np.ndarray]
METHODS = ("euler", "midpoint", "rk4")


@dataclass(frozen=True)
class IntegratorConfig:
    method: str = "rk4"
    n_steps: int = 100

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown integrator {self.method!r}; choose from {METHODS}")
        if self.n_steps <= 0:
            raise ValueError("n_steps must be positive")


@dataclass
class Trajectory:
    times: np.ndarray  # (n_steps + 1,)
    states: np.ndarray  # (n_steps + 1, n_samples, dim)
    direction: str
    cond: Conditioning | None = None

    @property
    def start(self) -> np.ndarray:
        return self.states[0]

    @property
    def end(self) -> np.ndarray:
        return self.states[-1]

    def _index(self, t: float) -> int:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 1e-9:
            raise ValueError(f"time {t} is not on the trajectory grid")
        return i

    def at(self, t: float) -> np.ndarray:
        """State at grid time ``t``; must be one of the recorded times up to 1e-9."""
        return self.states[self._index(t)]

    def to_csv(self, path, times=None, comment: str | None = None) -> None:
        """One row per (sample, time); ``times`` restricts output to those grid times."""
        idx = range(len(self.times)) if times is None else [self._index(t) for t in times]
        header = ["sample_id", "t"] + [f"dim_{k}" for k in range(self.states.shape[2])]
        rows = (
            [sid, fmt(self.times[k])] + [fmt(v) for v in row]
            for k in idx
            for sid, row in enumerate(self.states[k])
        )
        write_csv(path, header, rows, comment)


def _step(f: Field, method: str, z: np.ndarray, t: float, h: float) -> np.ndarray:
    if method == "euler":
        return z + h * f(z, t)
    if method == "midpoint":
        k1 = f(z, t)
        return z + h * f(z + 0.5 * h * k1, t + 0.5 * h)
    k1 = f(z, t)
    k2 = f(z + 0.5 * h * k1, t + 0.5 * h)
    k3 = f(z + 0.5 * h * k2, t + 0.5 * h)
    k4 = f(z + h * k3, t + h)
    return z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(field: Field, z_start, t_start: float, t_end: float,
              config: IntegratorConfig = IntegratorConfig()) -> Trajectory:
    """Integrate from ``t_start`` to ``t_end`` on a uniform grid, recording every state."""
    for name, t in (("t_start", t_start), ("t_end", t_end)):
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"{name}={t} outside [0, 1]")
    if t_start == t_end:
        raise ValueError("t_start and t_end must differ")
    z = np.array(z_start, dtype=np.float64)
    if z.ndim == 1:
        z = z[None, :]
    times = np.linspace(t_start, t_end, config.n_steps + 1)
    states = np.empty((config.n_steps + 1, *z.shape))
    states[0] = z
    for k in range(config.n_steps):
        # intermediate stage times may overshoot [0, 1] by an ulp
        z = _step(lambda x, s: field(x, min(max(s, 0.0), 1.0)), config.method, z,
                  times[k], times[k + 1] - times[k])
        if not np.all(np.isfinite(z)):
            raise NumericError(f"integrate: non-finite state at step {k + 1} (t={times[k + 1]:.6g})")
        states[k + 1] = z
    return Trajectory(times, states, "forward" if t_end > t_start else "backward")


def flow_field(model: FlowModel, cond: Conditioning, guidance: float | None = None) -> Field:
    """Velocity of ``model`` as a plain numpy field; ``guidance`` selects the CFG mix."""

    def f(z: np.ndarray, t: float) -> np.ndarray:
        c = cond.broadcast(len(z))
        if guidance is None:
            return velocity(model, z, t, c).data
        return guided_velocity(model, z, t, c, guidance).data

    return f


def invert_to_base(model: FlowModel, z1, cond: Conditioning,
                   config: IntegratorConfig = IntegratorConfig()) -> Trajectory:
    """Run the flow backwards from t = 1 to t = 0. A null ``cond`` inverts unconditionally."""
    traj = integrate(flow_field(model, cond), z1, 1.0, 0.0, config)
    traj.cond = cond
    return traj


def generate(model: FlowModel, z0, cond: Conditioning,
             config: IntegratorConfig = IntegratorConfig(), guidance: float | None = None) -> Trajectory:
    traj = integrate(flow_field(model, cond, guidance), z0, 0.0, 1.0, config)
    traj.cond = cond
    return traj
