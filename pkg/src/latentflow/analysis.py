"""Evaluation battery over trained models and flow trajectories.

Linear probes measure how linearly decodable a factor is at each time of an
inverted trajectory; the class-structure score measures how much class
information a representation still carries; style transfer and feature
isolation recombine inversions and generations under different conditions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.preprocessing import StandardScaler

from .csvio import fmt, write_csv
from .flow import Conditioning, FlowModel
from .ode import IntegratorConfig, Trajectory, generate, invert_to_base
from .vae import VaeModel, decode_array, encode_mean

PROBE_GRID = tuple(np.round(np.linspace(0.0, 1.0, 11), 10))
PROBE_HEADER = ["t", "target", "r2_mean", "r2_std", "flow_kind"]


class DegenerateDesignError(np.linalg.LinAlgError):
    pass


# -- closed-form ridge regression ------------------------------------------
@dataclass
class RidgeProbe:
    weights: np.ndarray
    intercept: float

    @classmethod
    def fit(cls, x: np.ndarray, y: np.ndarray, lam: float = 1e-6) -> "RidgeProbe":
        """Least squares with an unpenalised intercept and penalty ``lam * ||w||^2``."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        xm, ym = x.mean(axis=0), y.mean()
        xc = x - xm
        gram = xc.T @ xc
        if lam == 0 and np.linalg.matrix_rank(gram) < gram.shape[0]:
            raise DegenerateDesignError(
                "degenerate design matrix: features are collinear; pass a nonzero ridge lambda"
            )
        w = np.linalg.solve(gram + lam * np.eye(gram.shape[0]), xc.T @ (y - ym))
        return cls(w, float(ym - xm @ w))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) @ self.weights + self.intercept


def r2_score(y: np.ndarray, pred: np.ndarray) -> float:
    y = np.asarray(y, dtype=np.float64)
    sst = np.sum((y - y.mean()) ** 2)
    return float(1.0 - np.sum((y - pred) ** 2) / sst)


# -- probe reports -----------------------------------------------------------
@dataclass
class ProbeReport:
    times: np.ndarray
    r2_mean: dict[str, np.ndarray]
    r2_std: dict[str, np.ndarray]
    flow_kind: str
    train_r2_mean: dict[str, np.ndarray] = field(default_factory=dict)

    def value(self, target: str, t: float) -> float:
        i = int(np.argmin(np.abs(self.times - t)))
        return float(self.r2_mean[target][i])

    def rows(self):
        for i, t in enumerate(self.times):
            for name in self.r2_mean:
                yield [fmt(t), name, fmt(self.r2_mean[name][i]), fmt(self.r2_std[name][i]), self.flow_kind]

    def to_csv(self, path, comment: str | None = None) -> None:
        write_csv(path, PROBE_HEADER, self.rows(), comment)

    def as_dict(self) -> dict:
        return {
            "flow_kind": self.flow_kind,
            "times": [float(t) for t in self.times],
            "r2_mean": {k: [float(v) for v in a] for k, a in self.r2_mean.items()},
            "r2_std": {k: [float(v) for v in a] for k, a in self.r2_std.items()},
        }


def linear_probe_r2(
    trajectory: Trajectory,
    targets: dict[str, np.ndarray] | np.ndarray,
    rng: np.random.Generator,
    grid=PROBE_GRID,
    n_train: int = 512,
    n_repeats: int = 5,
    lam: float = 1e-6,
    flow_kind: str = "conditional",
) -> ProbeReport:
    """Test-set R^2 of a ridge probe at every grid time.

    Each repeat draws ``n_train`` samples at random for fitting and scores on the
    remaining samples; the same split is used at every time so curves are
    comparable along the flow.
    """
    if not isinstance(targets, dict):
        targets = {"target": np.asarray(targets)}
    n = trajectory.states.shape[1]
    for name, y in targets.items():
        if len(y) != n:
            raise ValueError(f"target {name!r} has {len(y)} values for {n} trajectory samples")
    if n_train >= n:
        raise ValueError(f"n_train={n_train} leaves no test samples out of {n}")
    splits = [rng.permutation(n) for _ in range(n_repeats)]
    times = np.asarray(grid, dtype=np.float64)
    test = {k: np.zeros((len(times), n_repeats)) for k in targets}
    train = {k: np.zeros((len(times), n_repeats)) for k in targets}
    for i, t in enumerate(times):
        z = trajectory.at(t)
        for j, perm in enumerate(splits):
            a, b = perm[:n_train], perm[n_train:]
            for name, y in targets.items():
                probe = RidgeProbe.fit(z[a], y[a], lam)
                test[name][i, j] = r2_score(y[b], probe.predict(z[b]))
                train[name][i, j] = r2_score(y[a], probe.predict(z[a]))
    return ProbeReport(
        times=times,
        r2_mean={k: v.mean(axis=1) for k, v in test.items()},
        r2_std={k: v.std(axis=1) for k, v in test.items()},
        flow_kind=flow_kind,
        train_r2_mean={k: v.mean(axis=1) for k, v in train.items()},
    )


# -- class structure -------------------------------------------------------------
class ClassProbe:
    """Multinomial logistic regression on standardised features."""

    def __init__(self, c: float = 100.0, max_iter: int = 5000):
        self.scaler = StandardScaler()
        self.clf = LogisticRegression(C=c, max_iter=max_iter)

    def fit(self, x: np.ndarray, labels: np.ndarray) -> "ClassProbe":
        if len(np.unique(labels)) < 2:
            raise ValueError("class probe needs at least two classes")
        self.clf.fit(self.scaler.fit_transform(x), labels)
        return self

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.clf.predict(self.scaler.transform(x))

    def score(self, x: np.ndarray, labels: np.ndarray) -> float:
        return float(np.mean(self.predict(x) == labels))


def class_structure_score(latents: np.ndarray, labels: np.ndarray, rng: np.random.Generator,
                          test_fraction: float = 0.3) -> float:
    """Held-out accuracy of a linear classifier predicting ``labels`` from ``latents``."""
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise ValueError("class_structure_score: need at least two classes")
    perm = rng.permutation(len(labels))
    n_test = int(round(len(labels) * test_fraction))
    te, tr = perm[:n_test], perm[n_test:]
    return ClassProbe().fit(latents[tr], labels[tr]).score(latents[te], labels[te])


# -- style transfer and feature isolation -------------------------------------
def style_transfer(vae: VaeModel, flow: FlowModel, x: np.ndarray, cond_src: Conditioning,
                   cond_tgt: Conditioning, config: IntegratorConfig = IntegratorConfig()) -> np.ndarray:
    """Invert conditionally on ``cond_src``, regenerate under ``cond_tgt``, decode."""
    if np.any(cond_src.is_null):
        raise ValueError("style_transfer: source condition must not be null")
    z1 = encode_mean(vae, np.atleast_2d(x))
    z0 = invert_to_base(flow, z1, cond_src, config).end
    z1_new = generate(flow, z0, cond_tgt, config).end
    return decode_array(vae, z1_new)


@dataclass
class ResidualReport:
    reconstruction: np.ndarray
    regenerated: np.ndarray
    residual: np.ndarray

    @property
    def reconstruction_norm(self) -> np.ndarray:
        return np.linalg.norm(self.reconstruction, axis=-1)

    @property
    def regenerated_norm(self) -> np.ndarray:
        return np.linalg.norm(self.regenerated, axis=-1)

    @property
    def residual_norm(self) -> np.ndarray:
        return np.linalg.norm(self.residual, axis=-1)

    def to_csv(self, path, comment: str | None = None) -> None:
        header = ["sample_id", "field"] + [f"x{k}" for k in range(self.residual.shape[1])] + ["norm"]
        parts = (("reconstruction", self.reconstruction), ("regenerated", self.regenerated),
                 ("residual", self.residual))
        rows = (
            [sid, name] + [fmt(v) for v in arr[sid]] + [fmt(np.linalg.norm(arr[sid]))]
            for sid in range(len(self.residual))
            for name, arr in parts
        )
        write_csv(path, header, rows, comment)


def feature_isolation_residual(vae: VaeModel, flow: FlowModel, x: np.ndarray,
                               cond_reference: Conditioning,
                               config: IntegratorConfig = IntegratorConfig()) -> ResidualReport:
    """Reconstruction minus its regeneration under a reference condition.

    The latent is inverted with the unconditional field, then flowed forward
    under ``cond_reference``; what the reference condition overrides shows up
    in the residual.
    """
    x = np.atleast_2d(x)
    z1 = encode_mean(vae, x)
    z0 = invert_to_base(flow, z1, Conditioning.null(len(z1), flow.config.cont_dim), config).end
    z_ref = generate(flow, z0, cond_reference, config).end
    x_hat = decode_array(vae, z1)
    x_ref = decode_array(vae, z_ref)
    return ResidualReport(x_hat, x_ref, x_hat - x_ref)


# -- PCA ---------------------------------------------------------------------
@dataclass
class PcaResult:
    coords: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    explained_ratio: np.ndarray
    total_variance: float


def pca_project(latents: np.ndarray, k: int, rtol: float = 1e-10) -> PcaResult:
    x = np.asarray(latents, dtype=np.float64)
    n, dim = x.shape
    if k > dim:
        raise ValueError(f"pca_project: k={k} exceeds latent dimension {dim}")
    if n < k + 1:
        raise ValueError(f"pca_project: need at least k + 1 = {k + 1} samples, got {n}")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (n - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals, vecs = np.clip(vals[order], 0.0, None), vecs[:, order]
    rank = int(np.sum(vals > rtol * max(vals[0], np.finfo(float).tiny)))
    if k > rank:
        raise ValueError(f"pca_project: k={k} exceeds data rank {rank}")
    # fix the sign so the largest-magnitude loading of each component is positive
    signs = np.sign(vecs[np.argmax(np.abs(vecs), axis=0), np.arange(dim)])
    vecs = vecs * np.where(signs == 0, 1.0, signs)
    total = float(vals.sum())
    return PcaResult(
        coords=xc @ vecs[:, :k],
        components=vecs[:, :k],
        explained_variance=vals[:k],
        explained_ratio=vals[:k] / total,
        total_variance=total,
    )
