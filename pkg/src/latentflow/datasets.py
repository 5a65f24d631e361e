"""Synthetic datasets with known ground-truth factors.

Two generators:

* a mixture of four isotropic 2-D Gaussians, each sample tagged with its
  component index and its distance to the component mean;
* a linear-generative "factor" dataset, ``x = A onehot(class) + B (r, g, b) + noise``,
  standing in for colour-tinted digits: a class label plus three colour
  intensities drawn from U(0.05, 0.95).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .csvio import fmt, write_csv
from .rng import make_rng

DEFAULT_MEANS = ((3.0, 3.0), (-3.0, 3.0), (-3.0, -3.0), (3.0, -3.0))
N_RGB = 3


@dataclass(frozen=True)
class GaussianMixtureSpec:
    n_samples: int = 8192
    cov_scale: float = 0.5
    means: tuple[tuple[float, float], ...] = DEFAULT_MEANS

    def __post_init__(self):
        if self.n_samples <= 0:
            raise ValueError("n_samples must be positive")
        if self.cov_scale < 0:
            raise ValueError("cov_scale must be non-negative")


@dataclass
class GaussianData:
    """Columnar batch of mixture samples: ``x`` (n, 2), ``cls`` (n,), ``d`` (n,)."""

    x: np.ndarray
    cls: np.ndarray
    d: np.ndarray
    means: np.ndarray

    def __len__(self) -> int:
        return len(self.cls)

    def subset(self, idx) -> "GaussianData":
        return GaussianData(self.x[idx], self.cls[idx], self.d[idx], self.means)

    def to_csv(self, path, comment: str | None = None) -> None:
        rows = ([fmt(a), fmt(b), int(c), fmt(d)] for (a, b), c, d in zip(self.x, self.cls, self.d))
        write_csv(path, ["x0", "x1", "class", "d"], rows, comment)


def sample_gaussian_mixture(spec: GaussianMixtureSpec, rng: np.random.Generator) -> GaussianData:
    means = np.asarray(spec.means, dtype=np.float64)
    cls = rng.integers(0, len(means), size=spec.n_samples)
    noise = rng.standard_normal((spec.n_samples, 2)) * np.sqrt(spec.cov_scale)
    x = means[cls] + noise
    d = np.linalg.norm(x - means[cls], axis=1)
    return GaussianData(x=x, cls=cls, d=d, means=means)


@dataclass(frozen=True)
class FactorDatasetSpec:
    n_samples: int = 8192
    n_classes: int = 10
    rgb_low: float = 0.05
    rgb_high: float = 0.95
    observation_dim: int = 32
    mixing_seed: int = 1234
    sigma_obs: float = 0.05

    def __post_init__(self):
        if self.n_samples <= 0:
            raise ValueError("n_samples must be positive")
        if self.observation_dim < self.n_classes + N_RGB:
            raise ValueError(
                f"observation_dim={self.observation_dim} is below n_classes + 3 = "
                f"{self.n_classes + N_RGB}; the mixing matrix cannot have full column rank"
            )
        if self.sigma_obs < 0:
            raise ValueError("sigma_obs must be non-negative")


@dataclass
class FactorData:
    """Columnar batch: ``x`` (n, D), ``cls`` (n,), ``rgb`` (n, 3)."""

    x: np.ndarray
    cls: np.ndarray
    rgb: np.ndarray

    def __len__(self) -> int:
        return len(self.cls)

    @property
    def r(self) -> np.ndarray:
        return self.rgb[:, 0]

    @property
    def g(self) -> np.ndarray:
        return self.rgb[:, 1]

    @property
    def b(self) -> np.ndarray:
        return self.rgb[:, 2]

    def subset(self, idx) -> "FactorData":
        return FactorData(self.x[idx], self.cls[idx], self.rgb[idx])

    def to_csv(self, path, comment: str | None = None) -> None:
        header = [f"x{i}" for i in range(self.x.shape[1])] + ["class", "r", "g", "b"]
        rows = (
            [fmt(v) for v in row] + [int(c)] + [fmt(v) for v in col]
            for row, c, col in zip(self.x, self.cls, self.rgb)
        )
        write_csv(path, header, rows, comment)


def mixing_matrices(spec: FactorDatasetSpec) -> tuple[np.ndarray, np.ndarray]:
    """Column-normalised Gaussian mixing matrices (A for class, B for colour)."""
    rng = make_rng(spec.mixing_seed)
    m = rng.standard_normal((spec.observation_dim, spec.n_classes + N_RGB))
    m /= np.linalg.norm(m, axis=0, keepdims=True)
    return m[:, : spec.n_classes], m[:, spec.n_classes :]


def factor_observations(spec: FactorDatasetSpec, cls: np.ndarray, rgb: np.ndarray,
                        noise: np.ndarray | None = None) -> np.ndarray:
    a, b = mixing_matrices(spec)
    x = a[:, cls].T + rgb @ b.T
    if noise is not None:
        x = x + spec.sigma_obs * noise
    return x


def sample_factor_dataset(spec: FactorDatasetSpec, rng: np.random.Generator) -> FactorData:
    n = spec.n_samples
    cls = rng.integers(0, spec.n_classes, size=n)
    rgb = rng.uniform(spec.rgb_low, spec.rgb_high, size=(n, N_RGB))
    noise = rng.standard_normal((n, spec.observation_dim))
    return FactorData(factor_observations(spec, cls, rgb, noise), cls, rgb)


def train_test_split(n: int, test_fraction: float, rng: np.random.Generator):
    perm = rng.permutation(n)
    n_test = int(round(n * test_fraction))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])
