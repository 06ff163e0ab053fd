import numpy as np
import pytest

from implicitface import nn
from implicitface.nn import Network, NetworkError, RMSprop


def rand_dense_net(rng, widths, acts):
    return Network("net", [nn.dense(rng, a, b, act)
                           for (a, b), act in zip(zip(widths, widths[1:]), acts)])


def test_zero_weight_dense_sigmoid_outputs_sigmoid_bias():
    rng = np.random.default_rng(0)
    layer = nn.dense(rng, 4, 2, "sigmoid")
    layer.weights[...] = 0.0
    layer.bias[...] = np.array([0.3, -1.2], np.float32)
    net = Network("n", [layer])
    for _ in range(3):
        y, _ = net.forward(rng.normal(size=(5, 4)).astype(np.float32))
        assert np.allclose(y, 1.0 / (1.0 + np.exp(-layer.bias)), atol=1e-6)


def test_identity_dense_layer_passes_through():
    rng = np.random.default_rng(1)
    layer = nn.dense(rng, 3, 3, "identity")
    layer.weights[...] = np.eye(3, dtype=np.float32)
    layer.bias[...] = 0.0
    x = rng.normal(size=(7, 3)).astype(np.float32)
    y, _ = Network("n", [layer]).forward(x)
    assert np.allclose(y, x)


def test_forward_matches_naive_loop_oracle():
    rng = np.random.default_rng(2)
    net = rand_dense_net(rng, [5, 8, 6, 2], ["relu", "tanh", "identity"])
    x = rng.normal(size=(3, 5)).astype(np.float32)
    y, _ = net.forward(x)

    # straight-line nested-loop reimplementation
    ref = x.astype(np.float64)
    for layer in net.layers:
        out = np.zeros((ref.shape[0], layer.weights.shape[1]))
        for r in range(ref.shape[0]):
            for c in range(layer.weights.shape[1]):
                s = float(layer.bias[c])
                for k in range(ref.shape[1]):
                    s += ref[r, k] * float(layer.weights[k, c])
                out[r, c] = s
        if layer.activation == "relu":
            out = np.maximum(out, 0)
        elif layer.activation == "tanh":
            out = np.tanh(out)
        ref = out
    assert np.max(np.abs(y - ref)) / max(1.0, np.max(np.abs(ref))) < 1e-6


def test_forward_shape_mismatch_names_layer():
    rng = np.random.default_rng(3)
    net = rand_dense_net(rng, [4, 4, 4], ["relu", "identity"])
    with pytest.raises(NetworkError, match="layer 0"):
        net.forward(np.zeros((2, 5), np.float32))


def test_forward_is_deterministic():
    rng = np.random.default_rng(4)
    net = rand_dense_net(rng, [6, 10, 1], ["tanh", "sigmoid"])
    x = rng.normal(size=(4, 6)).astype(np.float32)
    y1, _ = net.forward(x)
    y2, _ = net.forward(x)
    assert np.array_equal(y1, y2)


def test_backward_zero_grad_gives_zero():
    rng = np.random.default_rng(5)
    net = rand_dense_net(rng, [4, 5, 2], ["relu", "identity"])
    y, caches = net.forward(rng.normal(size=(3, 4)).astype(np.float32))
    grads, dx = net.backward(caches, np.zeros_like(y))
    assert np.all(dx == 0)
    assert all(np.all(dw == 0) and np.all(db == 0) for dw, db in grads)


def test_backward_scalar_chain_rule():
    rng = np.random.default_rng(6)
    layer = nn.dense(rng, 1, 1, "identity")
    layer.weights[...] = 2.5
    layer.bias[...] = 0.0
    net = Network("n", [layer])
    x = np.array([[3.0]], np.float32)
    y, caches = net.forward(x)
    grads, dx = net.backward(caches, np.ones_like(y))
    assert np.isclose(grads[0][0][0, 0], 3.0)
    assert np.isclose(dx[0, 0], 2.5)


def test_backward_stale_cache_rejected():
    rng = np.random.default_rng(7)
    net = rand_dense_net(rng, [4, 5, 2], ["relu", "identity"])
    _, caches = net.forward(rng.normal(size=(3, 4)).astype(np.float32))
    with pytest.raises(NetworkError):
        net.backward(caches[:1], np.zeros((3, 2), np.float32))
    with pytest.raises(NetworkError):
        net.backward(caches, np.zeros((4, 2), np.float32))


@pytest.mark.parametrize("act", ["relu", "sigmoid", "tanh", "identity"])
def test_gradcheck_dense(act):
    rng = np.random.default_rng(hash(act) % 2**32)
    net = Network("g", [nn.dense(rng, 5, 7, act), nn.dense(rng, 7, 3, "identity")])
    x = rng.normal(size=(2, 5)).astype(np.float32)
    assert nn.gradient_check(net, x, rng=rng) < 1e-4


@pytest.mark.parametrize("stride", [1, 2])
def test_gradcheck_conv2d(stride):
    rng = np.random.default_rng(stride)
    net = Network("c2", [nn.conv2d(rng, 2, 3, stride=stride),
                         nn.conv2d(rng, 3, 2, activation="identity")])
    x = rng.normal(size=(6, 6, 2)).astype(np.float32)
    assert nn.gradient_check(net, x, rng=rng) < 1e-4


@pytest.mark.parametrize("stride", [1, 2])
def test_gradcheck_conv3d(stride):
    rng = np.random.default_rng(10 + stride)
    net = Network("c3", [nn.conv3d(rng, 2, 2, stride=stride, activation="tanh")])
    x = rng.normal(size=(4, 4, 4, 2)).astype(np.float32)
    assert nn.gradient_check(net, x, rng=rng) < 1e-4


def test_conv2d_stride_downsamples():
    rng = np.random.default_rng(11)
    net = Network("c", [nn.conv2d(rng, 3, 4, stride=2), nn.conv2d(rng, 4, 4)])
    y, _ = net.forward(rng.normal(size=(16, 16, 3)).astype(np.float32))
    assert y.shape == (8, 8, 4)


def test_rmsprop_hand_computed_update():
    rng = np.random.default_rng(12)
    layer = nn.dense(rng, 1, 1, "identity")
    layer.weights[...] = 1.0
    layer.bias[...] = 0.0
    net = Network("n", [layer])
    opt = RMSprop(lr=0.1, rho=0.9, eps=1e-8)
    g = np.array([[2.0]], np.float32)
    assert opt.step(net, [(g, np.zeros(1, np.float32))])
    acc = 0.1 * 4.0  # (1-rho)*g^2
    expect = 1.0 - 0.1 * 2.0 / np.sqrt(acc + 1e-8)
    assert np.isclose(opt.acc["n/0/w"][0, 0], acc, rtol=1e-6)
    assert np.isclose(net.layers[0].weights[0, 0], expect, rtol=1e-6)


def test_rmsprop_zero_grad_decays_acc_only():
    rng = np.random.default_rng(13)
    net = rand_dense_net(rng, [3, 2], ["identity"])
    opt = RMSprop(lr=0.1)
    g1 = [(np.ones_like(net.layers[0].weights), np.ones_like(net.layers[0].bias))]
    opt.step(net, g1)
    w_before = net.layers[0].weights.copy()
    acc_before = opt.acc["net/0/w"].copy()
    g0 = [(np.zeros_like(net.layers[0].weights), np.zeros_like(net.layers[0].bias))]
    opt.step(net, g0)
    assert np.array_equal(net.layers[0].weights, w_before)
    assert np.allclose(opt.acc["net/0/w"], 0.9 * acc_before, rtol=1e-6)


def test_rmsprop_rejects_nonfinite_and_keeps_state():
    rng = np.random.default_rng(14)
    net = rand_dense_net(rng, [3, 2], ["identity"])
    opt = RMSprop(lr=0.1)
    w_before = net.layers[0].weights.copy()
    bad = np.full_like(net.layers[0].weights, np.nan)
    assert not opt.step(net, [(bad, np.zeros(2, np.float32))])
    assert np.array_equal(net.layers[0].weights, w_before)
    assert opt.acc == {}


def test_rmsprop_accumulators_stay_nonnegative_and_twins_stay_identical():
    rng = np.random.default_rng(15)
    net_a = rand_dense_net(rng, [4, 6, 1], ["relu", "identity"])
    net_b = net_a.copy()
    opt_a, opt_b = RMSprop(lr=1e-2), RMSprop(lr=1e-2)
    for step in range(20):
        x = np.random.default_rng(step).normal(size=(8, 4)).astype(np.float32)
        for net, opt in ((net_a, opt_a), (net_b, opt_b)):
            y, caches = net.forward(x)
            grads, _ = net.backward(caches, y)
            opt.step(net, grads)
        assert all(np.all(a >= 0) for a in opt_a.acc.values())
    for (_, pa), (_, pb) in zip(net_a.parameters(), net_b.parameters()):
        assert np.array_equal(pa, pb)


def test_training_loss_nonincreasing_on_toy_regression():
    rng = np.random.default_rng(16)
    net = Network("toy", [nn.dense(rng, 1, 16, "tanh"),
                          nn.dense(rng, 16, 1, "identity")])
    opt = RMSprop(lr=1e-3)
    x = np.linspace(-1, 1, 64)[:, None].astype(np.float32)
    t = (0.5 * x + 0.2).astype(np.float32)
    losses = []
    for _ in range(100):
        y, caches = net.forward(x)
        grads, _ = net.backward(caches, (y - t) / len(x))
        losses.append(float(np.mean((y - t) ** 2)))
        opt.step(net, grads)
    assert all(b <= a + 1e-9 for a, b in zip(losses, losses[1:]))
