import numpy as np
import pytest

from latentflow import autodiff as ad
from latentflow.autodiff import Tensor, grad_check
from latentflow.datasets import FactorDatasetSpec, sample_factor_dataset
from latentflow.errors import NumericError
from latentflow.rng import make_rng
from latentflow.vae import (
    EncodeResult,
    VaeConfig,
    VaeModel,
    decode,
    elbo_loss,
    encode,
    kl_divergence,
    reparameterize,
    train_vae,
)
from oracles import central_diff


@pytest.fixture
def model():
    return VaeModel(16, VaeConfig(latent_dim=4, hidden=32), make_rng(0))


def test_default_beta():
    assert VaeConfig().beta == 1e-6


def test_encode_deterministic_and_batch_consistent(model):
    x = make_rng(1).standard_normal((5, 16))
    e1, e2 = encode(model, x), encode(model, x)
    assert np.array_equal(e1.mu.data, e2.mu.data)
    assert e1.mu.shape == (5, 4) and e1.logvar.shape == (5, 4)
    for i in range(5):
        single = encode(model, x[i])
        np.testing.assert_allclose(single.mu.data, e1.mu.data[i], rtol=0, atol=1e-14)
        np.testing.assert_allclose(single.logvar.data, e1.logvar.data[i], rtol=0, atol=1e-14)
    assert np.all(np.isfinite(e1.logvar.data)) and np.all(np.exp(e1.logvar.data) > 0)


def test_zero_init_heads_give_zero_posterior():
    m = VaeModel(16, VaeConfig(latent_dim=4, hidden=32), make_rng(0), zero_init_heads=True)
    e = encode(m, make_rng(1).standard_normal((3, 16)))
    assert np.all(e.mu.data == 0) and np.all(e.logvar.data == 0)


def test_dimension_errors(model):
    with pytest.raises(ad.ShapeError):
        encode(model, np.zeros(15))
    with pytest.raises(ad.ShapeError):
        decode(model, np.zeros((2, 5)))


def test_decode_deterministic_and_batch_consistent(model):
    z = make_rng(2).standard_normal((4, 4))
    a, b = decode(model, z), decode(model, z)
    assert np.array_equal(a.data, b.data)
    for i in range(4):
        np.testing.assert_allclose(decode(model, z[i]).data, a.data[i], rtol=0, atol=1e-14)


def test_reparameterize_identities():
    mu = np.array([0.5, -1.0, 2.0])
    lv = np.array([0.3, -0.2, 1.0])
    enc = EncodeResult(Tensor(mu), Tensor(lv))
    np.testing.assert_array_equal(reparameterize(enc, np.zeros(3)).data, mu)
    n = np.array([1.0, 2.0, -3.0])
    z = reparameterize(EncodeResult(Tensor(mu), Tensor(np.zeros(3))), n).data
    np.testing.assert_array_equal(z, mu + n)
    np.testing.assert_allclose(reparameterize(enc, n).data, mu + np.exp(0.5 * lv) * n)


def test_reparameterize_jacobian_wrt_mu_is_identity():
    lv = np.array([0.3, -0.2, 1.0])
    n = np.array([1.0, 2.0, -3.0])
    mu0 = np.array([0.5, -1.0, 2.0])
    jac = np.stack([
        central_diff(lambda m, i=i: float(m[i] + np.exp(0.5 * lv[i]) * n[i]), mu0) for i in range(3)
    ])
    np.testing.assert_allclose(jac, np.eye(3), atol=1e-8)
    for i in range(3):
        mu = Tensor(mu0, requires_grad=True)
        reparameterize(EncodeResult(mu, Tensor(lv)), n)[i].backward()
        np.testing.assert_allclose(mu.grad, np.eye(3)[i], atol=1e-12)


def test_kl_closed_forms():
    zero = EncodeResult(Tensor(np.zeros(2)), Tensor(np.zeros(2)))
    assert kl_divergence(zero).item() == 0.0
    one = EncodeResult(Tensor(np.array([1.0, 0.0])), Tensor(np.zeros(2)))
    assert kl_divergence(one).item() == pytest.approx(0.5, abs=1e-15)


def test_kl_nonnegative_and_zero_only_at_prior():
    rng = make_rng(5)
    for _ in range(50):
        mu = rng.standard_normal(3) * rng.random()
        lv = rng.standard_normal(3) * rng.random()
        kl = kl_divergence(EncodeResult(Tensor(mu), Tensor(lv))).item()
        assert kl > 0


def test_elbo_reconstruction_and_beta_zero():
    x = make_rng(6).standard_normal((3, 4))
    enc = EncodeResult(Tensor(np.ones((3, 2))), Tensor(np.zeros((3, 2))))
    assert elbo_loss(x, Tensor(x), enc, 0.0).item() == 0.0
    # KL per sample = 0.5 * 2 = 1; reconstruction zero
    assert elbo_loss(x, Tensor(x), enc, 0.25).item() == pytest.approx(0.25)
    mu = Tensor(np.ones((3, 2)), requires_grad=True)
    elbo_loss(x, Tensor(x + 1.0), EncodeResult(mu, Tensor(np.zeros((3, 2)))), 0.0).backward()
    assert mu.grad is None  # KL left out of the graph


def test_elbo_gradient_matches_finite_differences():
    rng = make_rng(7)
    x = rng.standard_normal((4, 3))
    theta0 = rng.standard_normal(4 * 3 + 4 * 2 + 4 * 2) * 0.5

    def loss(theta):
        xh = theta[:12].reshape(4, 3)
        mu = theta[12:20].reshape(4, 2)
        lv = theta[20:28].reshape(4, 2)
        return elbo_loss(x, xh, EncodeResult(mu, lv), 0.7)

    assert grad_check(loss, theta0, 1e-5) <= 1e-4


def test_train_vae_deterministic_and_decreasing():
    data = sample_factor_dataset(FactorDatasetSpec(n_samples=600, observation_dim=16), make_rng(0))
    cfg = VaeConfig(latent_dim=6, hidden=32, epochs=6, batch_size=64)
    m1, log1 = train_vae(data.x, cfg, make_rng(1))
    m2, log2 = train_vae(data.x, cfg, make_rng(1))
    assert log1.epoch_loss == log2.epoch_loss
    assert log1.epoch_loss[-1] < log1.epoch_loss[0]
    for k, v in m1.state_dict().items():
        assert np.array_equal(v, m2.state_dict()[k])


def test_train_vae_reports_nan_epoch():
    x = np.full((64, 4), np.nan)
    with pytest.raises(NumericError, match="epoch 0"):
        train_vae(x, VaeConfig(latent_dim=2, hidden=8, epochs=1, batch_size=32), make_rng(0))
