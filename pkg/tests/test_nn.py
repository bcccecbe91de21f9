import numpy as np
import pytest

from helpers import network_fd_errors, toy_conv_net, toy_dense_float64
from l0arm.nn import (
    Conv2D,
    Dense,
    Gate,
    GatedNetwork,
    MaxPool2D,
    ShapeError,
    StaleCacheError,
    build_mlp,
    build_preset,
    loss,
)
from l0arm.rng import stream

FD_TOL = 1e-6


def test_toy_dense_gradients_match_finite_differences():
    rng = stream(0, "fd-dense")
    net = toy_dense_float64()
    x = rng.normal(size=(5, 6))
    y = rng.integers(0, 3, 5)
    masks = {"gate_in": np.array([1, 0, 1, 1, 0.7, 1.0]), "gate_h1": np.array([1, 1, 0, 0.5])}
    errs = network_fd_errors(net, x, y, masks)
    assert max(errs.values()) <= FD_TOL, errs


def test_toy_conv_gradients_match_finite_differences():
    rng = stream(0, "fd-conv")
    net = toy_conv_net()
    x = rng.normal(size=(4, 1, 8, 8))
    y = rng.integers(0, 3, 4)
    errs = network_fd_errors(net, x, y, {"gate_c": np.array([1.0, 0.6])})
    assert max(errs.values()) <= FD_TOL, errs


def test_conv_matches_direct_loop():
    rng = stream(1, "conv-loop")
    conv = Conv2D("c", 2, 3, 3)
    p = conv.init_params(rng, np.float64)
    p["b"] = rng.normal(size=3)
    x = rng.normal(size=(2, 2, 6, 5))
    y, _ = conv.forward(x, p, None)
    ref = np.zeros((2, 3, 4, 3))
    for n in range(2):
        for o in range(3):
            for i in range(4):
                for j in range(3):
                    ref[n, o, i, j] = np.sum(x[n, :, i:i + 3, j:j + 3] * p["W"][o]) + p["b"][o]
    np.testing.assert_allclose(y, ref, atol=1e-12)


def test_maxpool_routes_gradient_to_argmax():
    pool = MaxPool2D("p")
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    y, saved = pool.forward(x, None, None)
    np.testing.assert_array_equal(y[0, 0], [[5, 7], [13, 15]])
    dx, _ = pool.backward(np.ones_like(y), saved, None, None)
    assert dx.sum() == 4 and dx[0, 0, 1, 1] == 1 and dx[0, 0, 0, 0] == 0


def test_gate_masks_features_and_channels():
    g = Gate("g", 3)
    x2 = np.ones((2, 3))
    np.testing.assert_array_equal(g.forward(x2, None, np.array([1, 0, 1]))[0], [[1, 0, 1]] * 2)
    x4 = np.ones((1, 3, 2, 2))
    y4, _ = g.forward(x4, None, np.array([0, 1, 0]))
    assert y4[0, 1].sum() == 4 and y4[0, 0].sum() == 0


def test_zero_mask_blocks_everything_downstream():
    net = toy_dense_float64()
    x = stream(2, "zero").normal(size=(3, 6))
    out, _ = net.forward(x, {"gate_in": np.zeros(6)}, keep_cache=False)
    # with all inputs gated off only the biases reach the output
    expect = np.maximum(net.params["fc1"]["b"], 0) @ net.params["fc2"]["W"] + net.params["fc2"]["b"]
    np.testing.assert_allclose(out, np.tile(expect, (3, 1)))


def test_presets_have_expected_gates():
    mlp = build_preset("mlp_784_300_100")
    assert [(g.name, g.size, g.group_size) for g in mlp.gates] == [
        ("gate_in", 784, 300), ("gate_h1", 300, 100), ("gate_h2", 100, 10)
    ]
    lenet = build_preset("lenet5_caffe")
    assert [g.size for g in lenet.gates] == [20, 50, 800, 500]
    assert [g.group_size for g in lenet.gates] == [25, 500, 500, 10]
    assert lenet.shapes[-1] == (10,)
    with pytest.raises(ValueError):
        build_preset("vgg")


def test_output_layer_must_not_be_gated():
    with pytest.raises(ValueError):
        GatedNetwork([Dense("fc", 4, 2), Gate("g", 2)], (4,))


def test_shape_errors():
    net = toy_dense_float64()
    with pytest.raises(ShapeError):
        net.forward(np.zeros((2, 5)))
    with pytest.raises(ShapeError):
        net.forward(np.zeros((2, 6)), {"gate_in": np.ones(5)})
    with pytest.raises(ShapeError):
        net.forward(np.zeros((2, 6)), {"nope": np.ones(6)})
    with pytest.raises(ShapeError):
        GatedNetwork([Dense("a", 4, 3), Dense("b", 2, 1)], (4,))


def test_stale_and_consumed_caches_are_rejected():
    net = toy_dense_float64()
    x, y = np.ones((2, 6)), np.array([0, 1])
    out, cache = net.forward(x)
    net.mark_updated()
    with pytest.raises(StaleCacheError):
        net.backward(cache, loss(out, y)[1])
    out, cache = net.forward(x)
    net.backward(cache, loss(out, y)[1])
    with pytest.raises(StaleCacheError):
        net.backward(cache, loss(out, y)[1])


def test_deterministic_init_and_copy():
    a, b = build_preset("toy_dense", seed=3), build_preset("toy_dense", seed=3)
    for k in a.flat_params():
        np.testing.assert_array_equal(a.flat_params()[k], b.flat_params()[k])
    c = a.copy()
    c.params["fc1"]["W"][0, 0] += 1
    assert a.params["fc1"]["W"][0, 0] != c.params["fc1"]["W"][0, 0]
    assert GatedNetwork.from_spec(a.spec()).spec() == a.spec()


def test_cross_entropy_and_mse():
    logits = np.array([[2.0, 0.0], [0.0, 0.0]])
    value, d = loss(logits, np.array([0, 1]))
    expect = (np.log(1 + np.exp(-2.0)) + np.log(2.0)) / 2
    assert value == pytest.approx(expect)
    np.testing.assert_allclose(d.sum(1), 0.0, atol=1e-15)
    value, d = loss(np.array([[1.0, 0.0]]), np.array([1]), "mse")
    assert value == pytest.approx(2.0)
    with pytest.raises(ValueError):
        loss(np.zeros((0, 2)), np.zeros(0, dtype=int))


def test_cross_entropy_is_stable_for_large_logits():
    value, d = loss(np.array([[1000.0, -1000.0]]), np.array([1]))
    assert value == pytest.approx(2000.0) and np.all(np.isfinite(d))


def test_build_mlp():
    net = build_mlp([2, 8], 3)
    assert [g.size for g in net.gates] == [2, 8]
    assert net.shapes[-1] == (3,)
