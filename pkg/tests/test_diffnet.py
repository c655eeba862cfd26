import math

import numpy as np
import pytest

from helpers import autodiff_grad, central_diff, kink_safe_error, projected, rel_error
from kshield.diffnet import (Checkpoint, ModelConfig, Network, Tensor, avg_pool2d, conv2d, cross_entropy,
                             feature_tap, init_params, linear, relu, softmax, square, train)


def test_conv_1x1_scales():
    x = Tensor(np.array([[[[1, 2], [3, 4]]]], np.float32))
    out = conv2d(x, Tensor(np.full((1, 1, 1, 1), 2, np.float32)), Tensor(np.zeros(1, np.float32)))
    np.testing.assert_array_equal(out.data, [[[[2, 4], [6, 8]]]])


def test_conv_zero_weight_gives_bias():
    x = Tensor(np.random.default_rng(0).random((2, 3, 5, 5), dtype=np.float32))
    out = conv2d(x, Tensor(np.zeros((4, 3, 3, 3), np.float32)), Tensor(np.array([1, 2, 3, 4], np.float32)), pad=1)
    assert out.shape == (2, 4, 5, 5)
    np.testing.assert_array_equal(out.data, np.broadcast_to(np.array([1, 2, 3, 4], np.float32)[None, :, None, None],
                                                            out.shape))


def test_conv_shape_mismatch_reports_dims():
    with pytest.raises(ValueError, match="channel"):
        conv2d(Tensor(np.zeros((1, 3, 4, 4), np.float32)), Tensor(np.zeros((2, 2, 3, 3), np.float32)))


def test_conv_matches_naive_loop():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 6, 5)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, pad=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1))).astype(np.float64)
    ref = np.zeros(out.shape)
    for n in range(2):
        for o in range(4):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    ref[n, o, i, j] = (xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]).sum() + b[o]
    np.testing.assert_allclose(out, ref, atol=1e-5)


def test_conv_input_gradient_fd():
    rng = np.random.default_rng(2)
    x = rng.random((1, 3, 8, 8)).astype(np.float32)
    w = Tensor(rng.standard_normal((4, 3, 3, 3)).astype(np.float32))
    b = Tensor(rng.standard_normal(4).astype(np.float32))
    f = lambda t: conv2d(t, w, b, pad=1).sum()
    num = central_diff(lambda a: f(Tensor(a)).data, x)
    assert rel_error(autodiff_grad(f, x), num) < 1e-3


def test_relu_values_and_gradient():
    x = Tensor(np.array([-1.0, 0.0, 2.0, 3.0], np.float32), requires_grad=True)
    y = relu(x)
    np.testing.assert_array_equal(y.data, [0, 0, 2, 3])
    y.sum().backward()
    assert x.grad[0] == 0 and x.grad[3] == 1


def test_avgpool_values():
    x = Tensor(np.array([[[[1, 3], [5, 7]]]], np.float32))
    assert avg_pool2d(x, 2).data.item() == 4
    ones = avg_pool2d(Tensor(np.ones((1, 1, 4, 4), np.float32)), 2, 2)
    np.testing.assert_array_equal(ones.data, np.ones((1, 1, 2, 2)))
    with pytest.raises(ValueError):
        avg_pool2d(x, 0)


def test_avgpool_gradient_fd():
    x = np.random.default_rng(3).random((2, 3, 4, 6)).astype(np.float32)
    build, scalar = projected(lambda t: avg_pool2d(t, 2), x)
    assert rel_error(autodiff_grad(build, x), central_diff(scalar, x)) < 1e-3


def test_linear_values_and_gradient():
    eye = linear(Tensor(np.array([[0.3, -0.7]], np.float32)), Tensor(np.eye(2, dtype=np.float32)),
                 Tensor(np.zeros(2, np.float32)))
    np.testing.assert_array_equal(eye.data, np.array([[0.3, -0.7]], np.float32))
    out = linear(Tensor(np.array([[0.5, 0.5]], np.float32)), Tensor(np.array([[1, -2]], np.float32)))
    assert out.data.item() == pytest.approx(-0.5)
    rng = np.random.default_rng(4)
    x = rng.standard_normal((3, 5)).astype(np.float32)
    w, b = Tensor(rng.standard_normal((4, 5)).astype(np.float32)), Tensor(rng.standard_normal(4).astype(np.float32))
    build, scalar = projected(lambda t: linear(t, w, b), x)
    assert rel_error(autodiff_grad(build, x), central_diff(scalar, x)) < 1e-3


def test_cross_entropy_symmetric_logits():
    loss, probs = cross_entropy(Tensor(np.zeros((1, 2), np.float32)), [1])
    assert loss.data.item() == pytest.approx(math.log(2), abs=1e-6)
    np.testing.assert_allclose(probs, [[0.5, 0.5]])


def test_softmax_normalized():
    logits = np.random.default_rng(5).standard_normal((50, 10)).astype(np.float32) * 10
    p = softmax(logits)
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    rng = np.random.default_rng(6)
    z = rng.standard_normal((4, 5)).astype(np.float32)
    y = np.array([0, 3, 4, 1])
    zt = Tensor(z, requires_grad=True)
    loss, probs = cross_entropy(zt, y)
    loss.backward()
    np.testing.assert_allclose(zt.grad, probs - np.eye(5)[y], atol=1e-6)
    num = central_diff(lambda a: cross_entropy(Tensor(a), y)[0].data, z)
    assert rel_error(zt.grad, num) < 1e-3


def test_cross_entropy_rejects_bad_label():
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros((1, 3), np.float32)), [3])


def test_backward_polynomial_and_constant():
    x = Tensor(np.array([1.0, 2.0], np.float32), requires_grad=True)
    square(x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2, 4])
    y = Tensor(np.array([1.0, 2.0], np.float32), requires_grad=True)
    (y * 0.0).sum().backward()
    np.testing.assert_array_equal(y.grad, [0, 0])


def test_backward_requires_scalar():
    x = Tensor(np.ones(3, np.float32), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def _small_net(seed, channels=(4, 6), hw=8):
    config = ModelConfig(num_classes=3, height=hw, width=hw, in_channels=2, channels=channels)
    return Checkpoint(config, init_params(config, seed), seed=seed)


def test_full_cnn_input_gradient_fd():
    ck = _small_net(0)
    net = Network(ck)
    rng = np.random.default_rng(7)
    for i in range(5):
        x = rng.random((1, 8, 8, 2)).astype(np.float32)
        y = np.array([i % 3])
        f = lambda t: cross_entropy(net(t), y)[0]
        err, kept = kink_safe_error(autodiff_grad(f, x), lambda a: f(Tensor(a)).data, x)
        assert err < 1e-3 and kept > 0.75


def test_feature_tap_shapes_and_zero_model():
    config = ModelConfig()
    ck = Checkpoint(config, init_params(config, 0))
    x = np.random.default_rng(0).random((2, 16, 16, 3)).astype(np.float32)
    for block, expected in zip(range(1, 5), [(16, 16, 16), (32, 8, 8), (64, 4, 4), (128, 2, 2)]):
        assert config.tap_shape(block) == expected
        assert feature_tap(ck, x, block).shape == (2,) + expected
    zero = Checkpoint(config, {k: np.zeros_like(v) for k, v in ck.params.items()})
    assert not feature_tap(zero, x, 4).any()
    with pytest.raises(ValueError):
        feature_tap(ck, x, 5)


def test_model_config_needs_two_blocks():
    with pytest.raises(ValueError):
        ModelConfig(channels=(8,))


def test_logits_finite():
    ck = _small_net(1)
    x = np.random.default_rng(1).random((4, 8, 8, 2)).astype(np.float32)
    assert np.isfinite(Network(ck).logits(x)).all()


def _separable(n=80, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    images = rng.random((n, 8, 8, 2)).astype(np.float32) * 0.3
    images[labels == 1, :, :, 0] += 0.6
    return images, labels


def test_train_separable_reaches_095():
    images, labels = _separable()
    config = ModelConfig(num_classes=2, height=8, width=8, in_channels=2, channels=(4, 8))
    ck = train(images, labels, config, epochs=20, seed=0, batch_size=16)
    assert ck.train_accuracy >= 0.95
    assert ck.epochs == 20 and ck.seed == 0


def test_train_zero_epochs_and_determinism():
    images, labels = _separable(32)
    config = ModelConfig(num_classes=2, height=8, width=8, in_channels=2, channels=(4, 8))
    ck0 = train(images, labels, config, epochs=0, seed=3)
    init = init_params(config, 3)
    assert all(np.array_equal(ck0.params[k], init[k]) for k in init)
    a = train(images, labels, config, epochs=2, seed=5)
    b = train(images, labels, config, epochs=2, seed=5)
    assert a.to_bytes() == b.to_bytes()
    with pytest.raises(ValueError):
        train(images[:0], labels[:0], config)


def test_checkpoint_round_trip(tmp_path):
    ck = _small_net(2)
    path = tmp_path / "m.ckpt"
    ck.save(path)
    blob = path.read_bytes()
    assert blob[:8] == b"KSCKPT01"
    back = Checkpoint.load(path)
    assert back.config == ck.config and back.to_bytes() == blob
    with pytest.raises(ValueError):
        Checkpoint.from_bytes(blob[:-3])
    with pytest.raises(ValueError):
        Checkpoint.from_bytes(b"XXXXXXXX" + blob[8:])
