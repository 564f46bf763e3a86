import numpy as np
import pytest
import tensorflow as tf

from iusseg.learn.lrn_net import NetConfig, Network, InvalidNetConfig, ShapeError, layout, parameter_count, \
    init_network, forward, forward_tensor, dice_loss_tensor, soft_dice_loss, loss_and_gradient, backward

TINY = NetConfig(in_channels=1, base_channels=2, dense_block_layers=1, scales=2, growth=1, activation='elu')


def cube_target(n=4):
    target = np.zeros((n, n, n), dtype=np.float32)
    target[1:3, 1:3, 1:3] = 1.0
    return target


def test_config_validation():
    with pytest.raises(InvalidNetConfig):
        NetConfig(base_channels=0)
    with pytest.raises(InvalidNetConfig):
        NetConfig(activation='tanh')
    assert NetConfig.from_dict(TINY.to_dict()) == TINY
    assert NetConfig(scales=3).divisor == 4


def test_layout():
    entries = layout(TINY)
    assert [e['name'] for e in entries] == ['stem/w', 'stem/b', 'scale0/dense0/w', 'scale0/dense0/b',
                                            'scale0/down/w', 'scale0/down/b', 'scale1/dense0/w',
                                            'scale1/dense0/b', 'head/w', 'head/b']
    assert entries[4]['shape'] == [3, 3, 3, 3, 2]
    assert entries[8]['shape'] == [1, 1, 1, 6, 1]
    for a, b in zip(entries, entries[1:]):
        assert b['offset'] == a['offset'] + a['size']
    assert parameter_count(TINY) == 337


def test_network():
    with pytest.raises(ShapeError):
        Network(TINY, np.zeros(10))
    net = init_network(TINY, seed=4)
    assert net.equals(init_network(TINY, seed=4))
    assert not net.equals(init_network(TINY, seed=5))
    assert np.all(net.tensor('stem/b') == 0.0)
    assert net.tensor('stem/w').shape == (3, 3, 3, 1, 2)
    assert np.std(net.tensor('scale0/down/w')) == pytest.approx(np.sqrt(2.0 / 81), rel=0.3)
    with pytest.raises(KeyError):
        net.tensor('nope')


def test_forward():
    net = init_network(TINY, 0)
    patch = np.random.default_rng(0).random((1, 4, 6, 8), dtype=np.float32)
    probs = forward(net, patch)
    assert probs.shape == (1, 4, 6, 8)
    assert np.all((probs > 0.0) & (probs < 1.0))
    assert np.array_equal(probs, forward(net, patch))
    with pytest.raises(ShapeError):
        forward(net, np.zeros((1, 5, 4, 4), dtype=np.float32))
    with pytest.raises(ShapeError):
        forward(net, np.zeros((2, 4, 4, 4), dtype=np.float32))


def test_zero_parameters_give_one_half():
    net = Network(TINY, np.zeros(parameter_count(TINY)))
    probs = forward(net, np.random.default_rng(1).random((1, 8, 8, 8), dtype=np.float32))
    assert np.all(probs == 0.5)


def test_translation_covariance():
    rng = np.random.default_rng(5)
    net = Network(TINY, 0.3 * rng.standard_normal(parameter_count(TINY)))
    patch = np.zeros((1, 32, 8, 8), dtype=np.float32)
    patch[0, 12:16] = rng.random((4, 8, 8), dtype=np.float32)
    shifted = np.roll(patch, 4, axis=1)
    a, b = forward(net, patch), forward(net, shifted)
    # interior: output x depends on input [x - 6, x + 8]
    np.testing.assert_allclose(b[:, 12:24], a[:, 8:20], atol=1e-5)


class TestDiceLoss:
    def test_values(self):
        target = cube_target()
        loss, _ = soft_dice_loss(target, target)
        assert loss == pytest.approx(0.0, abs=1e-6)
        loss, _ = soft_dice_loss(np.zeros_like(target), target)
        assert loss == pytest.approx(1.0, abs=1e-5)
        with pytest.raises(ShapeError):
            soft_dice_loss(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_analytic_gradient(self):
        rng = np.random.default_rng(2)
        pred = 0.01 + 0.98 * rng.random((4, 4, 4))
        target = (rng.random((4, 4, 4)) > 0.5).astype(np.float64)
        _, grad = soft_dice_loss(pred, target)
        eps = 1e-6
        for i in np.ndindex(pred.shape):
            up, down = pred.copy(), pred.copy()
            up[i] += eps
            down[i] -= eps
            numeric = (soft_dice_loss(up, target)[0] - soft_dice_loss(down, target)[0]) / (2 * eps)
            assert grad[i] == pytest.approx(numeric, rel=1e-4, abs=1e-9)


class TestGradients:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        net = init_network(TINY, 1)
        patch = rng.random((1, 8, 8, 8), dtype=np.float32)
        target = (rng.random((8, 8, 8)) > 0.6).astype(np.float32)
        grad = backward(net, patch, target, dtype=tf.float64)
        assert grad.shape == (parameter_count(TINY),)
        x = tf.constant(np.transpose(patch, (1, 2, 3, 0))[None].astype(np.float64))
        g = tf.constant(target[None, ..., None].astype(np.float64))

        def loss(flat):
            return float(tf.reduce_mean(dice_loss_tensor(forward_tensor(tf.constant(flat), x, TINY), g)))

        flat = net.parameters.astype(np.float64)
        eps = 1e-6
        for i in rng.choice(parameter_count(TINY), size=50, replace=False):
            up, down = flat.copy(), flat.copy()
            up[i] += eps
            down[i] -= eps
            numeric = (loss(up) - loss(down)) / (2 * eps)
            assert abs(grad[i] - numeric) <= 1e-3 * max(abs(grad[i]), abs(numeric)) + 1e-8, i

    def test_batch_gradient_is_the_mean(self):
        net = init_network(TINY, 2)
        rng = np.random.default_rng(3)
        patches = [rng.random((1, 4, 4, 4), dtype=np.float32) for _ in range(2)]
        targets = [cube_target(), 1.0 - cube_target()]
        loss, grad = loss_and_gradient(net, patches, targets, tf.float64)
        singles = [loss_and_gradient(net, [p], [t], tf.float64) for p, t in zip(patches, targets)]
        assert loss == pytest.approx((singles[0][0] + singles[1][0]) / 2.0)
        np.testing.assert_allclose(grad, (singles[0][1] + singles[1][1]) / 2.0, rtol=1e-7, atol=1e-10)

    def test_targets_must_match(self):
        net = init_network(TINY, 0)
        with pytest.raises(ShapeError):
            loss_and_gradient(net, [np.zeros((1, 4, 4, 4), dtype=np.float32)], [np.zeros((4, 4, 2))])
