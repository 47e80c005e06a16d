import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import numeric_grad
from retina_grader.errors import LabelError, ShapeError, UsageError
from retina_grader.nn import Network, NetworkSpec, softmax
from retina_grader.optim import (
    SGDConfig, cross_entropy, quadratic_loss, quadratic_loss_grad, sgd_step, train_step,
)
from retina_grader.tensor import Rng


def test_quadratic_loss_values():
    assert quadratic_loss(1.0, 1.0) == 0.0
    assert math.isclose(quadratic_loss(0.7, 1.0), 0.045, rel_tol=1e-12)
    assert quadratic_loss(0.3, -2.0) == quadratic_loss(-2.0, 0.3)


@settings(max_examples=50, deadline=None)
@given(st.floats(-100, 100), st.floats(-100, 100))
def test_quadratic_loss_gradient_matches_finite_difference(y, t):
    h = 1e-4
    numeric = (quadratic_loss(y + h, t) - quadratic_loss(y - h, t)) / (2 * h)
    assert abs(numeric - quadratic_loss_grad(y, t)) < 1e-8 * max(1.0, abs(y - t)) * 1e3


def test_cross_entropy_values():
    loss, _ = cross_entropy(np.eye(5)[[2]], [2])
    assert loss.value == 0.0
    loss, grad = cross_entropy(np.full((1, 5), 0.2), [4])
    assert math.isclose(loss.value, math.log(5), rel_tol=1e-12)
    assert np.allclose(grad, [[0.2, 0.2, 0.2, 0.2, -0.8]])
    loss, _ = cross_entropy(np.array([[1.0, 0.0], [0.5, 0.5]]), [1, 0])
    assert math.isclose(loss.per_sample[0], -math.log(1e-12))
    assert math.isclose(loss.value, np.mean(loss.per_sample))


def test_cross_entropy_errors():
    p = np.full((2, 5), 0.2)
    with pytest.raises(LabelError):
        cross_entropy(p, [0, 5])
    with pytest.raises(LabelError):
        cross_entropy(p, [-1, 0])
    with pytest.raises(ShapeError):
        cross_entropy(p, [0])
    with pytest.raises(UsageError):
        cross_entropy(np.full((1, 5), 0.3), [0])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_cross_entropy_non_negative(seed):
    rng = np.random.default_rng(seed)
    p = softmax(rng.standard_normal((3, 5)) * 5)
    loss, _ = cross_entropy(p, rng.integers(0, 5, 3))
    assert loss.value >= 0 and all(v >= 0 for v in loss.per_sample)


@pytest.mark.parametrize("seed", range(10))
def test_sgd_step_is_bit_exact(seed):
    rng = np.random.default_rng(seed)
    lr = float(rng.uniform(1e-4, 1.0))
    params = [rng.standard_normal((3, 4)), rng.standard_normal(7), rng.standard_normal((2, 2, 3, 3))]
    grads = [rng.standard_normal(p.shape) for p in params]
    expected = [p - lr * g for p, g in zip(params, grads)]
    sgd_step(SGDConfig(lr), params, grads)
    for p, e, g in zip(params, expected, grads):
        assert np.array_equal(p, e)
        assert np.all(g == 0.0)


def test_sgd_examples():
    w = np.array([0.5])
    sgd_step(SGDConfig(0.1), [w], [np.array([2.0])])
    assert w[0] == 0.5 - 0.1 * 2.0
    assert math.isclose(w[0], 0.3)
    w = np.array([0.5])
    sgd_step(SGDConfig(0.1), [w], [np.zeros(1)])
    assert w[0] == 0.5


def test_sgd_zero_rate_is_noop():
    rng = np.random.default_rng(0)
    p = rng.standard_normal((4, 4))
    before = p.copy()
    sgd_step(SGDConfig(0.0), [p], [rng.standard_normal((4, 4))])
    assert np.array_equal(p, before)


def test_two_half_steps_equal_one_step():
    # dyadic values keep every product exact, so equality is bit-for-bit
    g = np.array([0.5, -1.25, 2.0])
    a = np.array([1.0, 2.0, -3.0])
    b = a.copy()
    sgd_step(SGDConfig(0.25), [a], [g.copy()])
    sgd_step(SGDConfig(0.125), [b], [g.copy()])
    sgd_step(SGDConfig(0.125), [b], [g.copy()])
    assert np.array_equal(a, b)
    rng = np.random.default_rng(1)
    g, a = rng.standard_normal(50), rng.standard_normal(50)
    b = a.copy()
    sgd_step(SGDConfig(0.01), [a], [g.copy()])
    sgd_step(SGDConfig(0.005), [b], [g.copy()])
    sgd_step(SGDConfig(0.005), [b], [g.copy()])
    assert np.allclose(a, b, rtol=0, atol=1e-15)


def test_sgd_errors():
    with pytest.raises(ShapeError):
        sgd_step(SGDConfig(0.1), [np.zeros(3)], [np.zeros(4)])
    with pytest.raises(ShapeError):
        sgd_step(SGDConfig(0.1), [np.zeros(3)], [])
    for bad in (-0.1, float("nan"), float("inf")):
        with pytest.raises(UsageError):
            SGDConfig(bad)


def _small_net(seed):
    spec = NetworkSpec.from_tokens(
        (1, 6, 6), ["conv:4:3x3:1x1:1", "relu", "maxpool:2x2:2x2", "flatten", "dense:5", "softmax"], 5)
    return Network.initialise(spec, seed)


def test_train_step_descends_on_fixed_batch():
    net = _small_net(0)
    rng = np.random.default_rng(0)
    x = rng.random((8, 1, 6, 6))
    y = rng.integers(0, 5, 8)
    losses = [train_step(net, x, y, SGDConfig(0.01), Rng(0))[0].value for _ in range(51)]
    rises = sum(b > a for a, b in zip(losses, losses[1:]))
    assert rises <= 5
    assert losses[-1] < losses[0]


def test_train_step_zero_rate_keeps_parameters_and_loss():
    net = _small_net(1)
    before = net.state_dict()
    rng = np.random.default_rng(2)
    x, y = rng.random((4, 1, 6, 6)), np.array([0, 1, 2, 3])
    l1 = train_step(net, x, y, SGDConfig(0.0), Rng(0))[0].value
    l2 = train_step(net, x, y, SGDConfig(0.0), Rng(0))[0].value
    assert l1 == l2
    for k, v in net.state_dict().items():
        assert np.array_equal(v, before[k])


def test_linearly_separable_toy_reaches_full_accuracy():
    spec = NetworkSpec.from_tokens((1, 1, 2), ["flatten", "dense:2", "softmax"], 2)
    net = Network.initialise(spec, 0)
    rng = np.random.default_rng(3)
    pts = rng.standard_normal((200, 2))
    margin = pts[:, 0] + 0.5 * pts[:, 1]
    pts, margin = pts[np.abs(margin) > 0.3][:40], margin[np.abs(margin) > 0.3][:40]
    labels = (margin > 0).astype(np.int64)
    x = pts.reshape(-1, 1, 1, 2)
    accs = [train_step(net, x, labels, SGDConfig(0.1), Rng(step))[1] for step in range(200)]
    assert 1.0 in accs
    assert accs[-1] == 1.0


def test_train_step_gradients_are_cleared():
    net = _small_net(2)
    rng = np.random.default_rng(4)
    train_step(net, rng.random((2, 1, 6, 6)), np.array([0, 1]), SGDConfig(0.1), Rng(0))
    for _, _, g in net.parameters():
        assert np.all(g == 0.0)
