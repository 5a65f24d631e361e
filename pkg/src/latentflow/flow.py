"""Conditional velocity field trained by flow matching on the CondOT path.

The straight-line path between noise ``eps`` (t = 0) and data ``z`` (t = 1)

    z_t = t * z + (1 - t) * eps,    d z_t / dt = z - eps

gives the regression target. Labels are replaced by a null token with
probability ``dropout_p`` during training so the same network also learns
the unconditional field (classifier-free guidance).
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import MLP, Adam, Linear, Module, Tensor
from .errors import NumericError

log = logging.getLogger(__name__)

NULL = -1  # class id of the null token; also its raw-append input value


@dataclass
class Conditioning:
    """Batched conditioning: ``class_id`` (n,) with ``NULL`` for the null token,
    optional ``continuous`` (n, k) side factors (ignored where the class is null)."""

    class_id: np.ndarray
    continuous: np.ndarray | None = None

    def __post_init__(self):
        self.class_id = np.atleast_1d(np.asarray(self.class_id, dtype=np.int64))
        if self.continuous is not None:
            c = np.asarray(self.continuous, dtype=np.float64)
            if c.ndim == 1:
                c = c.reshape(len(self.class_id), -1) if len(self.class_id) > 1 else c.reshape(1, -1)
            if len(c) != len(self.class_id):
                raise ValueError(f"continuous has {len(c)} rows for {len(self.class_id)} labels")
            self.continuous = c

    def __len__(self) -> int:
        return len(self.class_id)

    @classmethod
    def null(cls, n: int, cont_dim: int = 0) -> "Conditioning":
        return cls(np.full(n, NULL), np.zeros((n, cont_dim)) if cont_dim else None)

    @property
    def is_null(self) -> np.ndarray:
        return self.class_id == NULL

    @property
    def cont_dim(self) -> int:
        return 0 if self.continuous is None else self.continuous.shape[1]

    def drop(self, mask: np.ndarray) -> "Conditioning":
        """Copy with rows where ``mask`` is true replaced by the null token."""
        cid = np.where(mask, NULL, self.class_id)
        cont = None
        if self.continuous is not None:
            cont = np.where(mask[:, None], 0.0, self.continuous)
        return Conditioning(cid, cont)

    def take(self, idx) -> "Conditioning":
        return Conditioning(self.class_id[idx], None if self.continuous is None else self.continuous[idx])

    def broadcast(self, n: int) -> "Conditioning":
        if len(self) == n:
            return self
        if len(self) != 1:
            raise ValueError(f"cannot broadcast conditioning of length {len(self)} to {n}")
        return self.take(np.zeros(n, dtype=np.int64))


@dataclass
class FlowConfig:
    latent_dim: int = 2
    scheme: str = "raw"  # "raw" (append class + t to the input) or "film"
    hidden: int = 63
    n_hidden: int = 3
    activation: str = "elu"
    n_classes: int = 4
    cont_dim: int = 0
    emb_dim: int = 16
    time_embedding: str = "raw"  # "raw" scalar or "fourier" features
    n_freq: int = 4
    zero_init_head: bool = False

    def __post_init__(self):
        if self.scheme not in ("raw", "film"):
            raise ValueError(f"unknown conditioning scheme {self.scheme!r}")
        if self.time_embedding not in ("raw", "fourier"):
            raise ValueError(f"unknown time embedding {self.time_embedding!r}")
        if self.activation not in ad.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


class FlowModel(Module):
    """Velocity MLP. Two conditioning schemes:

    ``raw``: input is ``[z, time features, class id (-1 for null), continuous]``.
    ``film``: input is ``[z, time features]``; every hidden pre-activation ``h``
    becomes ``(1 + scale) * h + shift``, where (scale, shift) for all layers come
    from one linear projection of ``[embedding(class), continuous]``. The null
    token has its own learned embedding row.
    """

    kind = "flow"

    def __init__(self, config: FlowConfig, rng: np.random.Generator):
        self.config = config
        c = config
        tdim = self.time_dim
        if c.scheme == "raw":
            sizes = [c.latent_dim + tdim + 1 + c.cont_dim] + [c.hidden] * c.n_hidden + [c.latent_dim]
            self.net = MLP(sizes, rng, c.activation, zero_last=c.zero_init_head)
        else:
            dims = [c.latent_dim + tdim] + [c.hidden] * c.n_hidden
            self.trunk = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
            self.head = Linear(c.hidden, c.latent_dim, rng, zero=c.zero_init_head)
            # row n_classes is the null token
            self.embedding = Tensor(rng.standard_normal((c.n_classes + 1, c.emb_dim)) * 0.5,
                                    requires_grad=True)
            self.film = Linear(c.emb_dim + c.cont_dim, 2 * c.hidden * c.n_hidden, rng)

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    @property
    def time_dim(self) -> int:
        return 1 if self.config.time_embedding == "raw" else 1 + 2 * self.config.n_freq

    def describe(self) -> dict:
        return asdict(self.config)

    @classmethod
    def from_description(cls, desc: dict) -> "FlowModel":
        return cls(FlowConfig(**desc), np.random.default_rng(0))

    def time_features(self, t: np.ndarray) -> np.ndarray:
        t = t.reshape(-1, 1)
        if self.config.time_embedding == "raw":
            return t
        k = np.arange(1, self.config.n_freq + 1) * (2.0 * math.pi)
        return np.concatenate([t, np.sin(t * k), np.cos(t * k)], axis=1)

    def check_conditioning(self, cond: Conditioning) -> None:
        bad = (cond.class_id != NULL) & ((cond.class_id < 0) | (cond.class_id >= self.config.n_classes))
        if bad.any():
            raise ValueError(
                f"unknown class id {int(cond.class_id[bad][0])}; valid ids are "
                f"0..{self.config.n_classes - 1} or {NULL} for the null token"
            )
        if cond.cont_dim != self.config.cont_dim:
            raise ValueError(f"expected {self.config.cont_dim} continuous factors, got {cond.cont_dim}")

    def forward(self, z_t: Tensor, t: np.ndarray, cond: Conditioning, film: bool = True) -> Tensor:
        c = self.config
        tf = self.time_features(t)
        if c.scheme == "raw":
            cols = [z_t, tf, cond.class_id.astype(np.float64).reshape(-1, 1)]
            if c.cont_dim:
                cols.append(np.where(cond.is_null[:, None], 0.0, cond.continuous))
            return self.net(ad.concat(cols, axis=1))
        act = ad.ACTIVATIONS[c.activation]
        h = ad.concat([z_t, tf], axis=1)
        mod = None
        if film:
            rows = np.where(cond.is_null, c.n_classes, cond.class_id)
            cvec = ad.take_rows(self.embedding, rows)
            if c.cont_dim:
                cvec = ad.concat([cvec, np.where(cond.is_null[:, None], 0.0, cond.continuous)], axis=1)
            mod = self.film(cvec)
        H = c.hidden
        for i, layer in enumerate(self.trunk):
            h = layer(h)
            if mod is not None:
                scale = mod[:, 2 * i * H : (2 * i + 1) * H]
                shift = mod[:, (2 * i + 1) * H : (2 * i + 2) * H]
                h = h * (scale + 1.0) + shift
            h = act(h)
        return self.head(h)

    def trunk_only(self, z_t, t) -> Tensor:
        """FiLM network evaluated with no modulation at all."""
        n = ad.as_tensor(z_t).shape[0]
        return self.forward(ad.as_tensor(z_t), _time_column(t, n), Conditioning.null(n), film=False)


def _time_column(t, n: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        t = np.full(n, float(t))
    t = t.reshape(-1)
    if len(t) != n:
        raise ValueError(f"time has {len(t)} entries for a batch of {n}")
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("time must lie in [0, 1]")
    return t


def velocity(model: FlowModel, z_t, t, cond: Conditioning) -> Tensor:
    """Velocity at (z_t, t). ``z_t`` may be one vector or an (n, dim) batch."""
    z = ad.as_tensor(z_t)
    single = z.ndim == 1
    if single:
        z = z.reshape(1, -1)
    if z.ndim != 2 or z.shape[1] != model.latent_dim:
        raise ad.ShapeError(f"velocity: expected latent dim {model.latent_dim}, got shape {ad.as_tensor(z_t).shape}")
    n = z.shape[0]
    tc = _time_column(t, n)
    cond = cond.broadcast(n)
    model.check_conditioning(cond)
    out = model.forward(z, tc, cond)
    return out.reshape(model.latent_dim) if single else out


def guided_velocity(model: FlowModel, z_t, t, cond: Conditioning, w: float) -> Tensor:
    """Classifier-free guidance mix ``(1 - w) * u_null + w * u_cond``.

    Algebraically ``u_null + w (u_cond - u_null)``; written this way so w = 1 and
    w = 0 reproduce the conditional and unconditional fields bit-for-bit.
    """
    if np.any(np.asarray(cond.class_id) == NULL):
        raise ValueError("guided_velocity needs a non-null condition")
    n = 1 if ad.as_tensor(z_t).ndim == 1 else ad.as_tensor(z_t).shape[0]
    u_c = velocity(model, z_t, t, cond)
    u_0 = velocity(model, z_t, t, Conditioning.null(n, cond.cont_dim))
    return u_0 * (1.0 - w) + u_c * w


def condot_interpolate(z, eps, t):
    """z_t = t * z + (1 - t) * eps. ``t`` is a scalar or one value per row."""
    z = np.asarray(z, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z.shape != eps.shape:
        raise ValueError(f"condot_interpolate: z shape {z.shape} != eps shape {eps.shape}")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("condot_interpolate: t must lie in [0, 1]")
    if t.ndim == 1 and z.ndim == 2:
        t = t[:, None]
    return t * z + (1.0 - t) * eps


def target_velocity(z, eps) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z.shape != eps.shape:
        raise ValueError(f"target_velocity: z shape {z.shape} != eps shape {eps.shape}")
    return z - eps


@dataclass
class CfmDraw:
    """Per-sample randomness of one CFM loss evaluation."""

    t: np.ndarray
    eps: np.ndarray
    drop: np.ndarray

    def take(self, idx) -> "CfmDraw":
        return CfmDraw(self.t[idx], self.eps[idx], self.drop[idx])


def draw_cfm(n: int, dim: int, rng: np.random.Generator, dropout_p: float) -> CfmDraw:
    if not 0.0 <= dropout_p <= 1.0:
        raise ValueError("dropout_p must lie in [0, 1]")
    t = rng.random(n)
    eps = rng.standard_normal((n, dim))
    drop = rng.random(n) < dropout_p
    return CfmDraw(t, eps, drop)


def cfm_loss_given(model, z: np.ndarray, cond: Conditioning, draw: CfmDraw) -> Tensor:
    """Batch mean of ||u(z_t, t, y) - (z - eps)||^2 for fixed draws."""
    z = np.asarray(z, dtype=np.float64)
    if len(z) == 0:
        raise ValueError("cfm_loss: empty batch")
    z_t = condot_interpolate(z, draw.eps, draw.t)
    target = target_velocity(z, draw.eps)
    pred = velocity(model, z_t, draw.t, cond.drop(draw.drop))
    diff = pred - target
    return (diff * diff).sum(axis=1).mean()


def cfm_loss(model, z: np.ndarray, cond: Conditioning, rng: np.random.Generator,
             dropout_p: float) -> Tensor:
    z = np.asarray(z, dtype=np.float64)
    return cfm_loss_given(model, z, cond, draw_cfm(len(z), z.shape[1], rng, dropout_p))


@dataclass
class FlowTrainConfig:
    dropout_p: float = 0.2
    batch_size: int = 256
    steps: int = 4000
    lr: float = 1e-3
    lr_final: float = 1e-4  # cosine decay target
    log_every: int = 100


@dataclass
class FlowTrainLog:
    step_loss: list[float] = field(default_factory=list)

    def smoothed(self, window: int = 100) -> list[float]:
        """Means over consecutive non-overlapping windows of ``window`` steps."""
        a = np.asarray(self.step_loss)
        k = len(a) // window
        if k == 0:
            return [float(a.mean())] if len(a) else []
        return [float(v) for v in a[: k * window].reshape(k, window).mean(axis=1)]


def train_flow(z: np.ndarray, cond: Conditioning, model_config: FlowConfig,
               config: FlowTrainConfig, rng: np.random.Generator,
               model: FlowModel | None = None) -> tuple[FlowModel, FlowTrainLog]:
    """Minimise the CFM loss with Adam on minibatches of precomputed latents."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != model_config.latent_dim:
        raise ValueError(f"train_flow: latents must be (n, {model_config.latent_dim}), got {z.shape}")
    if len(cond) != len(z):
        raise ValueError("train_flow: one conditioning row per latent required")
    init_rng, batch_rng, noise_rng = rng.spawn(3)
    if model is None:
        model = FlowModel(model_config, init_rng)
    model.check_conditioning(cond)
    params = model.parameters()
    opt = Adam(params, lr=config.lr)
    history = FlowTrainLog()
    n = len(z)
    bs = min(config.batch_size, n)
    for step in range(config.steps):
        frac = step / max(config.steps - 1, 1)
        opt.state.lr = config.lr_final + 0.5 * (config.lr - config.lr_final) * (1 + math.cos(math.pi * frac))
        idx = batch_rng.integers(0, n, size=bs)
        draw = draw_cfm(bs, z.shape[1], noise_rng, config.dropout_p)
        zb, cb = z[idx], cond.take(idx)
        value, grads = ad.forward_backward(lambda: cfm_loss_given(model, zb, cb, draw), params)
        if not np.isfinite(value):
            raise NumericError(f"train_flow: non-finite loss at step {step}")
        opt.step(grads)
        history.step_loss.append(value)
        if config.log_every and step % config.log_every == 0:
            log.debug("flow step %d loss %.6g", step, value)
    return model, history
