import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sleepzoom import neural as nn


def test_init_examples():
    net = nn.init((4, 128, 128, 3), np.random.default_rng(0))
    assert len(net.weights) == 3 and net.layer_dims[1:3] == (128, 128)
    assert all(np.all(b == 0) for b in net.biases)
    again = nn.init((4, 128, 128, 3), np.random.default_rng(0))
    assert np.array_equal(net.flat(), again.flat())


def test_forward_examples():
    net = nn.init((3, 5, 2), np.random.default_rng(1))
    net.load_flat(np.zeros(net.n_params))
    assert np.all(net(np.ones((4, 3))) == 0)
    soft = nn.init((3, 5, 4), np.random.default_rng(1), output_head="softmax")
    p = soft(np.random.default_rng(2).normal(size=(10, 3)))
    assert np.all(np.abs(p.sum(axis=1) - 1) <= 1e-12) and np.all(p > 0)
    ident = nn.DenseNet((3, 3), [np.eye(3)], [np.zeros(3)])
    x = np.array([[1.0, -2.0, 3.0]])
    assert np.array_equal(ident(x), x)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        nn.DenseNet((3, 2), [np.zeros((2, 2))], [np.zeros(2)])
    net = nn.init((3, 2), np.random.default_rng(0))
    with pytest.raises(ValueError):
        net(np.zeros((1, 4)))


def numeric_grad(net, x, upstream, eps=1e-5):
    base = net.flat().copy()
    g = np.zeros_like(base)
    for i in range(base.size):
        for sign in (1, -1):
            v = base.copy()
            v[i] += sign * eps
            net.load_flat(v)
            g[i] += sign * np.sum(upstream * nn.forward(net, x)[0])
        g[i] /= 2 * eps
    net.load_flat(base)
    return g


def flat_grads(grads):
    return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in zip(grads.weights, grads.biases)])


@pytest.mark.parametrize("head", ["linear", "softmax"])
def test_backprop_matches_finite_differences(head):
    rng = np.random.default_rng(3)
    net = nn.init((4, 6, 5, 3), rng, output_head=head)
    for b in net.biases:
        b[:] = rng.normal(scale=0.1, size=b.shape)
    x = rng.normal(size=(7, 4))
    up = rng.normal(size=(7, 3))
    out, trace = nn.forward(net, x)
    analytic = flat_grads(nn.backward(net, trace, up))
    numeric = numeric_grad(net, x, up)
    rel = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    assert np.max(rel[np.abs(numeric) > 1e-7]) <= 1e-4


def test_input_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    net = nn.init((5, 8, 1), rng)
    x = rng.normal(size=(1, 5))
    _, trace = nn.forward(net, x)
    g = nn.backward(net, trace, np.ones((1, 1))).inputs[0]
    for i in range(5):
        e = np.zeros_like(x)
        e[0, i] = 1e-6
        num = (net(x + e)[0, 0] - net(x - e)[0, 0]) / 2e-6
        assert num == pytest.approx(g[i], rel=1e-4, abs=1e-9)


def test_gradient_linearity_and_constant_loss():
    rng = np.random.default_rng(5)
    net = nn.init((3, 4, 2), rng)
    x = rng.normal(size=(5, 3))
    up = rng.normal(size=(5, 2))
    _, tr = nn.forward(net, x)
    g1 = flat_grads(nn.backward(net, tr, up))
    g2 = flat_grads(nn.backward(net, tr, 2 * up))
    np.testing.assert_allclose(g2, 2 * g1, rtol=1e-14)
    assert np.all(flat_grads(nn.backward(net, tr, np.zeros_like(up))) == 0)


def test_optimizer_examples():
    net = nn.DenseNet((1, 1), [np.array([[1.0]])], [np.array([0.0])])
    g = nn.Grads([np.array([[0.5]])], [np.array([0.0])])
    nn.apply_update(net, g, nn.OptimState(0.1, mode="sgd"))
    assert net.weights[0][0, 0] == pytest.approx(0.95, abs=1e-15)
    before = net.flat().copy()
    nn.apply_update(net, nn.Grads([np.zeros((1, 1))], [np.zeros(1)]), nn.OptimState(0.1, mode="sgd"))
    assert np.array_equal(net.flat(), before)
    assert nn.OptimState().learning_rate == 0.001


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["adam", "sgd"]))
def test_zero_learning_rate_is_identity(seed, mode):
    rng = np.random.default_rng(seed)
    net = nn.init((3, 4, 2), rng)
    before = net.flat().copy()
    _, tr = nn.forward(net, rng.normal(size=(4, 3)))
    nn.apply_update(net, nn.backward(net, tr, rng.normal(size=(4, 2))), nn.OptimState(0.0, mode=mode))
    assert np.array_equal(net.flat(), before)


def test_fits_y_equals_2x():
    rng = np.random.default_rng(6)
    net = nn.init((1, 16, 1), rng)
    opt = nn.OptimState(0.01)
    for _ in range(2000):
        x = rng.uniform(-1, 1, (32, 1))
        out, tr = nn.forward(net, x)
        nn.apply_update(net, nn.backward(net, tr, 2 * (out - 2 * x) / len(x)), opt)
    x = np.linspace(-1, 1, 201)[:, None]
    assert np.mean((net(x) - 2 * x) ** 2) < 1e-4


def test_checkpoint_round_trip(tmp_path):
    net = nn.init((3, 7, 2), np.random.default_rng(7), output_head="softmax")
    nn.save_checkpoint(net, tmp_path / "n.ckpt")
    back = nn.load_checkpoint(tmp_path / "n.ckpt")
    assert back.layer_dims == net.layer_dims and back.output_head == "softmax"
    assert np.array_equal(back.flat(), net.flat())
    (tmp_path / "bad.ckpt").write_text("nope\n")
    with pytest.raises(ValueError):
        nn.load_checkpoint(tmp_path / "bad.ckpt")
