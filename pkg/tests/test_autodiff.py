import math

import numpy as np
import pytest
from scipy.special import erf

from latentflow import autodiff as ad
from latentflow.autodiff import Adam, AdamState, MLP, Tensor, adam_step, forward_backward, grad_check
from latentflow.rng import make_rng
from oracles import central_diff, rel_err


def test_square_value_and_grad():
    x = Tensor(3.0, requires_grad=True)
    value, (g,) = forward_backward(lambda: x * x, [x])
    assert value == 9.0
    assert g == 6.0


@pytest.mark.parametrize("shape", [(1,), (3,), (2, 5), (4, 1, 3)])
def test_sum_grad_is_ones(shape):
    x = Tensor(np.random.default_rng(0).standard_normal(shape), requires_grad=True)
    _, (g,) = forward_backward(lambda: x.sum(), [x])
    assert g.shape == shape
    assert np.all(g == 1.0)


def test_mse_matmul_grad_matches_finite_differences():
    rng = np.random.default_rng(1)
    w0 = rng.standard_normal((4, 4))
    x = rng.standard_normal((4, 3))
    y = rng.standard_normal((4, 3))
    w = Tensor(w0.copy(), requires_grad=True)
    _, (g,) = forward_backward(lambda: ad.mse(w @ x, y), [w])
    ref = central_diff(lambda a: float(np.mean((a @ x - y) ** 2)), w0, 1e-5)
    assert rel_err(g, ref) < 1e-5


# elementwise primitives, each wrapped into a scalar with fixed random weights
PRIMITIVES = {
    "add": lambda x, c: ad.add(x, c),
    "mul": lambda x, c: ad.mul(x, c),
    "matmul": lambda x, c: ad.matmul(x.reshape(2, 3), c.reshape(3, 2)),
    "elu": lambda x, c: ad.elu(x),
    "gelu": lambda x, c: ad.gelu(x),
    "relu": lambda x, c: ad.relu(x),
    "exp": lambda x, c: ad.exp(x),
    "log": lambda x, c: ad.log(x),
    "sum": lambda x, c: ad.tsum(x * c, axis=0, keepdims=True),
    "mse": lambda x, c: ad.mse(x, c),
    "div": lambda x, c: ad.div(c, x),
    "tanh": lambda x, c: ad.tanh(x),
    "concat": lambda x, c: ad.concat([x, c * x], axis=0),
    "getitem": lambda x, c: x[1:4] * c[1:4],
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_at_random_points(name):
    op = PRIMITIVES[name]
    rng = np.random.default_rng(sorted(PRIMITIVES).index(name))
    worst = 0.0
    for _ in range(10):
        x0 = rng.standard_normal(6)
        if name in ("log", "div"):
            x0 = np.abs(x0) + 0.5
        c = rng.standard_normal(6)
        out_shape = op(Tensor(x0), Tensor(c)).shape
        wts = rng.standard_normal(out_shape)

        def f(x):
            return (op(x, Tensor(c)) * wts).sum()

        worst = max(worst, grad_check(f, x0, 1e-5))
    assert worst < 1e-4, f"{name}: max relative error {worst:.3e}"


def test_gelu_is_exact_erf_form():
    x = np.linspace(-4, 4, 41)
    expected = 0.5 * x * (1 + erf(x / math.sqrt(2)))
    np.testing.assert_allclose(ad.gelu(Tensor(x)).data, expected, rtol=0, atol=1e-15)


def test_grad_check_polynomial_and_elu():
    assert grad_check(lambda x: (x * x * x).sum(), np.array([2.0]), 1e-5) <= 1e-6
    assert grad_check(lambda x: ad.elu(x).sum(), np.array([1.0]), 1e-5) <= 1e-6


def test_grad_check_two_layer_mlp():
    rng = make_rng(3)
    net = MLP([5, 16, 3], rng, "gelu")
    x = rng.standard_normal((7, 5))
    y = rng.standard_normal((7, 3))
    flat = np.concatenate([p.data.ravel() for p in net.parameters()])
    shapes = [p.shape for p in net.parameters()]

    def loss(theta):
        parts, at = [], 0
        for shape in shapes:
            n = int(np.prod(shape))
            parts.append(theta[at : at + n].reshape(shape))
            at += n
        w1, b1, w2, b2 = parts
        return ad.mse(ad.gelu(Tensor(x) @ w1 + b1) @ w2 + b2, y)

    assert grad_check(loss, flat, 1e-5) <= 1e-4


def test_grad_check_rejects_non_scalar():
    with pytest.raises(ad.ShapeError):
        grad_check(lambda x: x * 2.0, np.ones(3), 1e-5)


def test_shape_mismatch_names_op_and_shapes():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.ones((4, 5)))
    with pytest.raises(ad.ShapeError, match=r"matmul.*\(2, 3\).*\(4, 5\)"):
        a @ b
    with pytest.raises(ad.ShapeError, match=r"add"):
        a + Tensor(np.ones(4))
    with pytest.raises(ad.ShapeError, match=r"mse"):
        ad.mse(a, Tensor(np.ones((3, 2))))


def test_shared_subexpression_visited_once():
    x = Tensor(2.0, requires_grad=True)
    y = x * x
    z = y + y  # y reused: dz/dx = 4x
    order = ad.topological_order(z)
    assert len(order) == len({id(n) for n in order})
    pos = {id(n): i for i, n in enumerate(order)}
    for node in order:
        for p in node._parents:
            assert pos[id(p)] < pos[id(node)]
    z.backward()
    assert x.grad == 8.0


def test_no_graph_without_grad():
    out = Tensor(np.ones(3)) * 2.0 + 1.0
    assert not out.requires_grad and out._parents == ()


def test_broadcast_bias_grad_sums_rows():
    x = Tensor(np.ones((5, 3)))
    b = Tensor(np.zeros(3), requires_grad=True)
    _, (g,) = forward_backward(lambda: (x + b).sum(), [b])
    np.testing.assert_array_equal(g, np.full(3, 5.0))


# -- Adam --------------------------------------------------------------------
def test_adam_zero_grad_fixed_point():
    p = [np.array([1.0, -2.0]), np.ones((2, 2))]
    st = AdamState.for_params(p)
    new, st2 = adam_step(p, [np.zeros(2), np.zeros((2, 2))], st)
    for a, b in zip(p, new):
        np.testing.assert_array_equal(a, b)
    assert st2.step == 1


def test_adam_first_step_hand_computed():
    p = [np.array(1.0)]
    st = AdamState.for_params(p, lr=0.1)
    (new,), st2 = adam_step(p, [np.array(1.0)], st)
    # m = 0.1, v = 0.001; bias-corrected m_hat = 1, v_hat = 1
    expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8)
    assert new == pytest.approx(expected, abs=1e-15)
    assert abs(new - 0.9) < 1e-8
    assert st2.m[0] == pytest.approx(0.1)
    assert st2.v[0] == pytest.approx(0.001)


def test_adam_identical_params_stay_identical():
    p = [np.array([0.3]), np.array([0.3])]
    g = [np.array([0.7]), np.array([0.7])]
    st = AdamState.for_params(p)
    for _ in range(5):
        p, st = adam_step(p, g, st)
    assert p[0][0] == p[1][0]


def test_adam_shape_mismatch():
    p = [np.zeros(3)]
    with pytest.raises(ad.ShapeError):
        adam_step(p, [np.zeros(2)], AdamState.for_params(p))


def test_adam_second_moment_nonnegative():
    rng = np.random.default_rng(0)
    p = [rng.standard_normal(4)]
    st = AdamState.for_params(p)
    for _ in range(20):
        p, st = adam_step(p, [rng.standard_normal(4)], st)
        assert np.all(st.v[0] >= 0)
        assert st.m[0].shape == p[0].shape


def test_training_is_bit_deterministic():
    def run(seed):
        rng = make_rng(seed)
        net = MLP([3, 8, 1], rng, "elu")
        opt = Adam(net.parameters(), lr=1e-2)
        x = rng.standard_normal((32, 3))
        y = np.sin(x.sum(axis=1, keepdims=True))
        losses = []
        for _ in range(30):
            v, g = forward_backward(lambda: ad.mse(net(Tensor(x)), y), net.parameters())
            opt.step(g)
            losses.append(v)
        return losses, net.state_dict()

    l1, s1 = run(7)
    l2, s2 = run(7)
    assert l1 == l2
    for k in s1:
        assert np.array_equal(s1[k], s2[k])
