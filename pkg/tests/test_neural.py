import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rising.nn import NetworkSpec, ResUNet, ResUNetRegressor, TrainConfig, load_checkpoint, save_checkpoint, train
from rising.nn.layers import (
    Conv2d,
    MaxPool2d,
    ReLU,
    TapeError,
    Upsample2d,
    conv2d_backward,
    conv2d_forward,
    maxpool2_backward,
    maxpool2_forward,
    mse_backward,
    mse_forward,
    relu_backward,
    relu_forward,
    tanh_backward,
    tanh_forward,
    upsample2_backward,
    upsample2_forward,
)
from rising.nn.optim import AdamState, adam_step, clip_by_global_norm, global_norm, polynomial_lr
from rising.nn.train import checkpoint_manifest_path


def fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    scale = max(np.max(np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b)) / scale)


def randomized_net(spec, seed=0):
    """float64 network with every parameter (head and biases included) random and nonzero."""
    net = ResUNet(spec, init_seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    for name, p in net.parameters().items():
        if name.startswith("head"):
            p[...] = rng.uniform(-0.5, 0.5, p.shape)
        elif name.endswith("bias"):
            p[...] = rng.uniform(-0.1, 0.1, p.shape)
    return net


# layers


def test_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 3, 5, 5))
    w = np.zeros((3, 3, 1, 1))
    w[[0, 1, 2], [0, 1, 2]] = 1.0
    out, _ = conv2d_forward(x, w, np.zeros(3))
    assert np.array_equal(out, x)


def test_ones_kernel_on_one_hot():
    x = np.zeros((1, 1, 5, 5))
    x[0, 0, 2, 2] = 1.0
    out, _ = conv2d_forward(x, np.ones((1, 1, 3, 3)), np.zeros(1))
    expected = np.zeros((5, 5))
    expected[1:4, 1:4] = 1.0
    assert np.array_equal(out[0, 0], expected)
    x = np.zeros((1, 1, 4, 4))
    x[0, 0, 0, 0] = 1.0
    out, _ = conv2d_forward(x, np.ones((1, 1, 3, 3)), np.zeros(1))
    expected = np.zeros((4, 4))
    expected[:2, :2] = 1.0
    assert np.array_equal(out[0, 0], expected)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 6, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out, _ = conv2d_forward(x, w, b)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 6, 5))
    for n in range(2):
        for o in range(4):
            for i in range(6):
                for j in range(5):
                    ref[n, o, i, j] = np.sum(xp[n, :, i : i + 3, j : j + 3] * w[o]) + b[o]
    assert np.allclose(out, ref, atol=1e-12)


def test_strided_conv_shape():
    out, _ = conv2d_forward(np.zeros((1, 2, 8, 8)), np.zeros((3, 2, 3, 3)), np.zeros(3), stride=2, pad=1)
    assert out.shape == (1, 3, 4, 4)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_conv_linearity(seed):
    rng = np.random.default_rng(seed)
    x1, x2 = rng.standard_normal((2, 1, 2, 6, 6)).astype(np.float32)
    w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
    z = np.zeros(3, np.float32)
    a, _ = conv2d_forward(x1 + x2, w, z)
    b1, _ = conv2d_forward(x1, w, z)
    b2, _ = conv2d_forward(x2, w, z)
    assert np.allclose(a, b1 + b2, atol=1e-5)


def test_conv_shape_errors_name_layer():
    with pytest.raises(ValueError, match="enc0.conv1"):
        conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((3, 5, 3, 3)), np.zeros(3), name="enc0.conv1")
    with pytest.raises(ValueError):
        conv2d_forward(np.zeros((2, 4, 4)), np.zeros((3, 2, 3, 3)), np.zeros(3))


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0)])
def test_conv_backward_fd(stride, pad):
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 2, 5, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    out, cache = conv2d_forward(x, w, b, stride, pad)
    probe = rng.standard_normal(out.shape)
    dx, dw, db = conv2d_backward(probe, cache)
    f = lambda: float(np.sum(conv2d_forward(x, w, b, stride, pad)[0] * probe))
    for analytic, arr in ((dx, x), (dw, w), (db, b)):
        assert rel_err(analytic, fd_grad(f, arr)) <= 1e-8


def test_linear_layer_mse_closed_form():
    # a 1x1 convolution is a linear layer on pixels: dW = 2 x^T (x w - y) / size
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 3, 2, 2))
    y = rng.standard_normal((4, 1, 2, 2))
    w = rng.standard_normal((1, 3, 1, 1))
    pred, cache = conv2d_forward(x, w, np.zeros(1))
    _, diff = mse_forward(pred, y)
    _, dw, _ = conv2d_backward(mse_backward(diff), cache)
    X = x.transpose(0, 2, 3, 1).reshape(-1, 3)
    Y = y.transpose(0, 2, 3, 1).reshape(-1, 1)
    expected = 2 * X.T @ (X @ w.reshape(3, 1) - Y) / Y.size
    assert np.allclose(dw.reshape(3, 1), expected, rtol=0, atol=1e-12)


def test_relu_tanh_pool_upsample_backward_fd():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 2, 4, 6))
    probe = rng.standard_normal(x.shape)
    _, mask = relu_forward(x)
    assert rel_err(relu_backward(probe, mask), fd_grad(lambda: float(np.sum(relu_forward(x)[0] * probe)), x)) < 1e-8
    _, y = tanh_forward(x)
    assert rel_err(tanh_backward(probe, y), fd_grad(lambda: float(np.sum(tanh_forward(x)[0] * probe)), x)) < 1e-8
    out, cache = maxpool2_forward(x)
    p2 = rng.standard_normal(out.shape)
    fd = fd_grad(lambda: float(np.sum(maxpool2_forward(x)[0] * p2)), x)
    assert rel_err(maxpool2_backward(p2, cache), fd) < 1e-8
    up = upsample2_forward(x)
    p3 = rng.standard_normal(up.shape)
    fd = fd_grad(lambda: float(np.sum(upsample2_forward(x) * p3)), x)
    assert rel_err(upsample2_backward(p3), fd) < 1e-8


def test_relu_flat_region_has_zero_gradient():
    x = -np.ones((1, 1, 3, 3))
    _, mask = relu_forward(x)
    assert not np.any(relu_backward(np.ones_like(x), mask))


def test_maxpool_values():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    out, _ = maxpool2_forward(x)
    assert out[0, 0].tolist() == [[5.0, 7.0], [13.0, 15.0]]
    with pytest.raises(ValueError):
        maxpool2_forward(np.zeros((1, 1, 3, 4)))


def test_backward_without_forward_raises():
    for layer in (Conv2d(1, 1, 3), ReLU(), MaxPool2d(), Upsample2d()):
        with pytest.raises(TapeError):
            layer.backward(np.zeros((1, 1, 2, 2)))
    conv = Conv2d(1, 1, 3)
    conv.forward(np.zeros((1, 1, 4, 4), np.float32))
    conv.backward(np.zeros((1, 1, 4, 4), np.float32))
    with pytest.raises(TapeError):
        conv.backward(np.zeros((1, 1, 4, 4), np.float32))


# network


def test_parameter_count_formula():
    for spec in (NetworkSpec(2, 4), NetworkSpec(3, 16), NetworkSpec(1, 2, 3, 5)):
        net = ResUNet(spec)
        assert sum(p.size for p in net.parameters().values()) == spec.parameter_count()
    assert NetworkSpec(2, 4).parameter_count() == 7477


def test_network_gradients_finite_differences():
    spec = NetworkSpec(levels=2, base_channels=4)
    net = randomized_net(spec)
    rng = np.random.default_rng(5)
    x = rng.uniform(0.05, 0.95, (2, 1, 8, 8))
    y = rng.uniform(0, 1, (2, 1, 8, 8))

    def loss():
        out = net.forward(x)
        net.clear()
        return mse_forward(out, y)[0]

    _, diff = mse_forward(net.forward(x), y)
    dx = net.backward(mse_backward(diff))
    grads = {k: v.copy() for k, v in net.gradients().items()}
    for name, p in net.parameters().items():
        assert rel_err(grads[name], fd_grad(loss, p)) <= 1e-6, name
    assert rel_err(dx, fd_grad(loss, x)) <= 1e-6


def test_output_range_and_batch_consistency():
    net = randomized_net(NetworkSpec(levels=2, base_channels=4))
    rng = np.random.default_rng(6)
    x = rng.uniform(-0.5, 1.5, (3, 1, 16, 16))
    out = net.forward(x)
    assert out.min() >= 0 and out.max() <= 1
    same = net.forward(np.repeat(x[:1], 4, axis=0))
    assert all(np.array_equal(same[0], same[i]) for i in range(4))
    assert np.array_equal(net.forward(x), out)


def test_zero_head_is_passthrough():
    net = ResUNet(NetworkSpec(levels=2, base_channels=4), dtype=np.float64)
    assert not np.any(net.head.weight) and not np.any(net.head.bias)
    x = np.random.default_rng(7).uniform(0, 1, (2, 1, 8, 8))
    assert np.allclose(net.forward(x), net.passthrough(x), atol=1e-12)
    assert np.max(np.abs(net.forward(x) - x)) <= net.spec.residual_margin / 2 + 1e-12


def test_input_size_must_divide():
    net = ResUNet(NetworkSpec(levels=3, base_channels=2))
    with pytest.raises(ValueError, match="divisible"):
        net.forward(np.zeros((1, 1, 12, 12), np.float32))


def test_spec_invariants():
    for kwargs in (dict(levels=0), dict(kernel_size=4), dict(base_channels=0), dict(residual_margin=1.0)):
        with pytest.raises(ValueError):
            NetworkSpec(**kwargs)


# optimizer


def test_polynomial_lr_endpoints():
    cfg = TrainConfig()
    assert polynomial_lr(0, 100, cfg) == 1e-3
    assert polynomial_lr(100, 100, cfg) == 1e-5
    assert polynomial_lr(50, 100, cfg) == pytest.approx(1e-5 + 0.5 * (1e-3 - 1e-5))


def test_single_adam_step():
    cfg = TrainConfig()
    p = {"w": np.array([0.5])}
    _, state, _ = adam_step(p, {"w": np.array([1.0])}, AdamState(), 1, cfg, 1e-3)
    assert p["w"][0] == pytest.approx(0.5 - 1e-3 / (1 + 1e-8), rel=0, abs=1e-15)
    assert state.step == 1


def test_clip_scales_exactly():
    g = {"a": np.array([30.0, 40.0])}
    clipped, norm = clip_by_global_norm(g, 5.0)
    assert norm == 50.0
    assert np.array_equal(clipped["a"], g["a"] * 0.1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_clip_invariance_below_threshold(seed):
    rng = np.random.default_rng(seed)
    grads = {"a": rng.standard_normal(5), "b": rng.standard_normal((2, 3))}
    grads = {k: v * (4.0 / global_norm(grads)) for k, v in grads.items()}
    p1 = {k: np.ones_like(v) for k, v in grads.items()}
    p2 = {k: np.ones_like(v) for k, v in grads.items()}
    adam_step(p1, grads, AdamState(), 1, TrainConfig(grad_clip=5.0), 1e-3)
    adam_step(p2, grads, AdamState(), 1, TrainConfig(grad_clip=None), 1e-3)
    assert all(np.array_equal(p1[k], p2[k]) for k in p1)


def test_non_finite_gradient_names_layer():
    with pytest.raises(FloatingPointError, match="enc1.conv0.weight"):
        adam_step({"enc1.conv0.weight": np.zeros(2)}, {"enc1.conv0.weight": np.array([np.nan, 0])},
                  AdamState(), 1, TrainConfig(), 1e-3)
    with pytest.raises(ValueError):
        adam_step({}, {}, AdamState(), 0, TrainConfig(), 1e-3)


def test_train_config_invariants():
    with pytest.raises(ValueError):
        TrainConfig(lr_start=1e-5, lr_end=1e-3)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


# training


@pytest.fixture(scope="module")
def toy_set():
    rng = np.random.default_rng(8)
    base = np.zeros((10, 16, 16))
    for img in base:
        r0, c0 = rng.integers(2, 8, 2)
        img[r0 : r0 + 6, c0 : c0 + 6] = rng.uniform(0.3, 0.9)
    noisy = np.clip(base + 0.05 * rng.standard_normal(base.shape), 0, 1)
    return noisy, base


def test_identity_training_reduces_loss(toy_set):
    x, _ = toy_set
    _, log, _ = train(x, x, NetworkSpec(2, 4), TrainConfig(epochs=5, batch_size=4))
    assert log.mean_loss[-1] < log.mean_loss[0]
    assert log.epochs == list(range(6))


def test_training_is_deterministic(toy_set):
    x, y = toy_set
    runs = [train(x, y, NetworkSpec(2, 4), TrainConfig(epochs=2, batch_size=4), init_seed=3)[1] for _ in range(2)]
    assert runs[0].mean_loss == runs[1].mean_loss


def test_training_rejects_bad_data():
    with pytest.raises(ValueError):
        train(np.zeros((0, 8, 8)), np.zeros((0, 8, 8)), NetworkSpec(2, 2), TrainConfig(epochs=1))
    with pytest.raises(ValueError):
        train(np.zeros((2, 8, 8)), np.zeros((3, 8, 8)), NetworkSpec(2, 2), TrainConfig(epochs=1))


def test_checkpoint_round_trip(tmp_path, toy_set):
    x, y = toy_set
    net, log, adam = train(x, y, NetworkSpec(2, 4), TrainConfig(epochs=1, batch_size=5))
    path = save_checkpoint(tmp_path / "m.ckpt", net, train_cfg=TrainConfig(epochs=1), log=log, adam=adam,
                           extra={"note": "x"})
    assert checkpoint_manifest_path(path).name == "m.ckpt.json"
    net2, manifest, adam2 = load_checkpoint(path)
    assert manifest["extra"] == {"note": "x"} and manifest["epoch"] == 1
    assert adam2.step == adam.step
    for k, v in net.parameters().items():
        assert np.array_equal(net2.parameters()[k], v)
    assert np.array_equal(net.predict(x[:, None].astype(np.float32)), net2.predict(x[:, None].astype(np.float32)))
    log.to_csv(tmp_path / "log.csv")
    assert (tmp_path / "log.csv").read_text().splitlines()[0] == "epoch,mean_loss,lr"


def test_regressor_estimator(tmp_path, toy_set):
    x, y = toy_set
    est = ResUNetRegressor(levels=2, base_channels=4, epochs=2, batch_size=4)
    assert est.get_params()["epochs"] == 2
    pred = est.fit(x, y).predict(x)
    assert pred.shape == x.shape and pred.dtype == np.float64
    assert math.isfinite(est.score(x, y))
    est.save(tmp_path / "r.ckpt")
    loaded = ResUNetRegressor.load(tmp_path / "r.ckpt")
    assert np.array_equal(loaded.predict(x), pred)
    assert loaded.get_params()["epochs"] == 2
