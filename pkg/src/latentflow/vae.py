"""MLP beta-VAE giving the latent space the flow model is trained on."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import MLP, Adam, Module, Tensor
from .errors import NumericError

log = logging.getLogger(__name__)


@dataclass
class VaeConfig:
    latent_dim: int = 8
    hidden: int = 128
    n_hidden: int = 2
    beta: float = 1e-6
    epochs: int = 50
    batch_size: int = 128
    lr: float = 1e-3


@dataclass
class EncodeResult:
    mu: Tensor
    logvar: Tensor


class VaeModel(Module):
    kind = "vae"

    def __init__(self, input_dim: int, config: VaeConfig, rng: np.random.Generator,
                 zero_init_heads: bool = False):
        self.input_dim = input_dim
        self.config = config
        h = [config.hidden] * config.n_hidden
        self.encoder = MLP([input_dim, *h, 2 * config.latent_dim], rng, "relu",
                           zero_last=zero_init_heads)
        self.decoder = MLP([config.latent_dim, *h, input_dim], rng, "relu",
                           zero_last=zero_init_heads)

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    @property
    def beta(self) -> float:
        return self.config.beta

    def describe(self) -> dict:
        return {"input_dim": self.input_dim, **asdict(self.config)}

    @classmethod
    def from_description(cls, desc: dict) -> "VaeModel":
        desc = dict(desc)
        input_dim = desc.pop("input_dim")
        return cls(input_dim, VaeConfig(**desc), np.random.default_rng(0))


def _as_batch(x, dim: int, what: str) -> tuple[Tensor, bool]:
    t = ad.as_tensor(x)
    single = t.ndim == 1
    if single:
        t = t.reshape(1, -1)
    if t.ndim != 2 or t.shape[1] != dim:
        raise ad.ShapeError(f"{what}: expected trailing dimension {dim}, got shape {ad.as_tensor(x).shape}")
    return t, single


def encode(model: VaeModel, x) -> EncodeResult:
    t, single = _as_batch(x, model.input_dim, "encode")
    out = model.encoder(t)
    k = model.latent_dim
    mu, logvar = out[:, :k], out[:, k:]
    if single:
        mu, logvar = mu.reshape(k), logvar.reshape(k)
    return EncodeResult(mu, logvar)


def reparameterize(enc: EncodeResult, noise) -> Tensor:
    """z = mu + exp(logvar / 2) * noise."""
    noise = ad.as_tensor(noise)
    if noise.shape != enc.mu.shape:
        raise ad.ShapeError(f"reparameterize: noise shape {noise.shape} != latent shape {enc.mu.shape}")
    return enc.mu + ad.exp(enc.logvar * 0.5) * noise


def decode(model: VaeModel, z) -> Tensor:
    t, single = _as_batch(z, model.latent_dim, "decode")
    out = model.decoder(t)
    return out.reshape(model.input_dim) if single else out


def kl_divergence(enc: EncodeResult) -> Tensor:
    """KL(N(mu, diag exp(logvar)) || N(0, I)) summed over latent dims, averaged over the batch."""
    term = ad.exp(enc.logvar) + enc.mu * enc.mu - 1.0 - enc.logvar
    if term.ndim == 1:
        return term.sum() * 0.5
    return term.sum(axis=1).mean() * 0.5


def elbo_loss(x, x_hat, enc: EncodeResult, beta: float) -> Tensor:
    """Negative ELBO surrogate: elementwise MSE + beta * KL.

    With ``beta == 0`` the KL term is left out of the graph entirely.
    """
    recon = ad.mse(x_hat, ad.as_tensor(x))
    if beta == 0:
        return recon
    return recon + kl_divergence(enc) * beta


@dataclass
class VaeTrainLog:
    epoch_loss: list[float] = field(default_factory=list)
    epoch_recon: list[float] = field(default_factory=list)
    epoch_kl: list[float] = field(default_factory=list)


def train_vae(x: np.ndarray, config: VaeConfig, rng: np.random.Generator,
              model: VaeModel | None = None) -> tuple[VaeModel, VaeTrainLog]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("train_vae: need a non-empty (n, dim) array")
    init_rng, data_rng = rng.spawn(2)
    if model is None:
        model = VaeModel(x.shape[1], config, init_rng)
    params = model.parameters()
    opt = Adam(params, lr=config.lr)
    history = VaeTrainLog()
    n = len(x)
    bs = min(config.batch_size, n)
    for epoch in range(config.epochs):
        perm = data_rng.permutation(n)
        tot = rec_tot = kl_tot = 0.0
        batches = 0
        for start in range(0, n - bs + 1, bs):
            xb = x[perm[start : start + bs]]
            noise = data_rng.standard_normal((bs, config.latent_dim))
            parts = {}

            def loss_fn():
                enc = encode(model, xb)
                xh = decode(model, reparameterize(enc, noise))
                rec = ad.mse(xh, xb)
                kl = kl_divergence(enc)
                parts["rec"], parts["kl"] = rec.item(), kl.item()
                return rec if config.beta == 0 else rec + kl * config.beta

            value, grads = ad.forward_backward(loss_fn, params)
            if not np.isfinite(value):
                raise NumericError(f"train_vae: non-finite loss at epoch {epoch} (batch {batches})")
            opt.step(grads)
            tot += value
            rec_tot += parts["rec"]
            kl_tot += parts["kl"]
            batches += 1
        history.epoch_loss.append(tot / batches)
        history.epoch_recon.append(rec_tot / batches)
        history.epoch_kl.append(kl_tot / batches)
        log.debug("vae epoch %d loss %.6g", epoch, history.epoch_loss[-1])
    return model, history


def encode_mean(model: VaeModel, x: np.ndarray, batch: int = 4096) -> np.ndarray:
    """Posterior means for a whole array, computed in chunks."""
    x = np.asarray(x, dtype=np.float64)
    return np.concatenate(
        [encode(model, x[i : i + batch]).mu.data for i in range(0, len(x), batch)], axis=0
    )


def decode_array(model: VaeModel, z: np.ndarray, batch: int = 4096) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return np.concatenate([decode(model, z[i : i + batch]).data for i in range(0, len(z), batch)], axis=0)
