import numpy as np
import pytest

from gradcheck import REL_TOL, layer_error, numeric_grad, rel_error, spread
from retina_grader.errors import ShapeError, UsageError
from retina_grader.nn import (
    Conv2D, ConvSpec, Dense, DenseSpec, Dropout, DropoutSpec, Network, NetworkSpec, Pool2D,
    PoolSpec, ReLU, Softmax, SoftmaxSpec, default_network_spec, dropout_forward, pool_forward,
    softmax,
)
from retina_grader.optim import cross_entropy
from retina_grader.tensor import Rng

SEEDS = range(10)


def naive_conv(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    sh, sw = stride
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // sh + 1
    ow = (wd + 2 * pad - kw) // sw + 1
    out = np.zeros((n, f, oh, ow))
    for bi in range(n):
        for fi in range(f):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[bi, :, i * sh : i * sh + kh, j * sw : j * sw + kw]
                    out[bi, fi, i, j] = np.sum(patch * w[fi]) + b[fi]
    return out


@pytest.mark.parametrize("seed", range(4))
def test_conv_forward_matches_naive(backend, seed):
    rng = np.random.default_rng(seed)
    spec = ConvSpec(2, 3, 3, 2, stride_h=2, stride_w=1, padding=1)
    layer = Conv2D(spec, Rng(seed))
    layer.params["bias"] = rng.standard_normal(3)
    x = rng.standard_normal((2, 2, 7, 6))
    got = layer.forward(x)
    want = naive_conv(x, layer.params["weight"], layer.params["bias"], (2, 1), 1)
    assert np.allclose(got, want, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("seed", SEEDS)
def test_conv_gradients(seed):
    rng = np.random.default_rng(seed)
    spec = ConvSpec(2, 3, 3, 3, stride_h=1 + seed % 2, stride_w=1, padding=seed % 2)
    layer = Conv2D(spec, Rng(seed))
    layer.params["bias"] = rng.standard_normal(3)
    x = rng.standard_normal((2, 2, 6, 5))
    assert layer_error(layer, x, seed) < REL_TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_dense_gradients(seed):
    rng = np.random.default_rng(seed)
    layer = Dense(DenseSpec(7, 4), Rng(seed))
    layer.params["bias"] = rng.standard_normal(4)
    assert layer_error(layer, rng.standard_normal((3, 7)), seed) < REL_TOL


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("mode", ["max", "average"])
def test_pool_gradients(seed, mode):
    rng = np.random.default_rng(seed)
    spec = PoolSpec(2 + seed % 2, 2, 1 + seed % 3, 2, mode)
    layer = Pool2D(spec)
    assert layer_error(layer, spread((2, 2, 7, 8), rng), seed, params=False) < REL_TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_relu_gradients(seed):
    rng = np.random.default_rng(seed)
    assert layer_error(ReLU(None), spread((3, 10), rng), seed, params=False) < REL_TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_dropout_rate_zero_gradients(seed):
    rng = np.random.default_rng(seed)
    layer = Dropout(DropoutSpec(0.0))
    x = rng.standard_normal((3, 8))
    r = np.random.default_rng(seed + 1000)
    out = layer.forward(x, train=True, rng=Rng(seed))
    w = r.standard_normal(out.shape)
    analytic = layer.backward(w)
    numeric = numeric_grad(lambda: float(np.sum(layer.forward(x, train=True, rng=Rng(seed)) * w)), x)
    assert rel_error(analytic, numeric) < REL_TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_dropout_fixed_mask_gradients(seed):
    """With the mask held fixed (same seed every call) dropout is linear in x."""
    rng = np.random.default_rng(seed)
    layer = Dropout(DropoutSpec(0.4))
    x = rng.standard_normal((3, 8))
    w = np.random.default_rng(seed + 1000).standard_normal(x.shape)
    layer.forward(x, train=True, rng=Rng(seed))
    analytic = layer.backward(w)
    numeric = numeric_grad(lambda: float(np.sum(layer.forward(x, train=True, rng=Rng(seed)) * w)), x)
    assert rel_error(analytic, numeric) < REL_TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_cross_entropy_gradients(seed):
    rng = np.random.default_rng(seed)
    scores = rng.standard_normal((4, 5)) * 2
    labels = rng.integers(0, 5, 4)
    _, grad = cross_entropy(softmax(scores), labels)
    numeric = numeric_grad(lambda: cross_entropy(softmax(scores), labels)[0].value, scores)
    assert rel_error(grad, numeric) < REL_TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_layer_backward(seed):
    rng = np.random.default_rng(seed)
    assert layer_error(Softmax(SoftmaxSpec()), rng.standard_normal((3, 5)), seed, params=False) < REL_TOL


@pytest.mark.parametrize("seed", range(3))
def test_whole_network_gradients(seed):
    spec = NetworkSpec.from_tokens(
        (2, 6, 6), ["conv:3:3x3:1x1:1", "relu", "avgpool:2x2:2x2", "flatten", "dense:5", "softmax"], 5)
    net = Network.initialise(spec, seed)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 2, 6, 6))
    labels = np.array([1, 3])
    probs = net.forward(x, "train")
    _, g = cross_entropy(probs, labels)
    gx = net.backward(g, from_scores=True)

    def loss():
        return cross_entropy(net.forward(x), labels)[0].value

    assert rel_error(gx, numeric_grad(loss, x)) < REL_TOL
    for key, p, grad in net.parameters():
        assert rel_error(grad, numeric_grad(loss, p)) < REL_TOL, key


def test_default_network_shapes():
    spec = default_network_spec()
    shapes = spec.shapes()
    assert shapes[0] == (16, 128, 128)
    assert shapes[-1] == (5,)
    assert spec.to_text().startswith("3x128x128 | conv:16:3x3:1x1:1, relu, maxpool:2x2:2x2,")
    assert NetworkSpec.from_text(spec.to_text()) == spec


def test_spec_validation_names_the_layer():
    with pytest.raises(ShapeError, match="layer 1"):
        NetworkSpec.from_tokens((1, 4, 4), ["flatten", "conv:2:3x3:1x1:0"], 5)
    with pytest.raises(ShapeError):
        NetworkSpec.from_tokens((1, 4, 4), ["conv:2:5x5:1x1:0"], 5).shapes()
    with pytest.raises(ShapeError):
        NetworkSpec.from_tokens((1, 4, 4), ["dense:5"], 5).shapes()
    with pytest.raises(UsageError):
        NetworkSpec.from_tokens((1, 4, 4), ["bogus:1"], 5)


def test_forward_rejects_wrong_input_shape():
    net = Network.initialise(default_network_spec((3, 16, 16), hidden=8), 0)
    with pytest.raises(ShapeError):
        net.forward(np.zeros((1, 3, 8, 8)))
    assert net.forward(np.zeros((3, 16, 16))).shape == (1, 5)


def test_backward_without_forward_is_an_error():
    layer = Dense(DenseSpec(3, 2), Rng(0))
    with pytest.raises(UsageError):
        layer.backward(np.zeros((1, 2)))
    layer.forward(np.zeros((1, 3)), train=False)
    with pytest.raises(UsageError):
        layer.backward(np.zeros((1, 2)))


def test_dropout_infer_identity_and_train_expectation():
    spec = DropoutSpec(0.3)
    x = np.full((1000,), 2.0)
    out, mask = dropout_forward(spec, x, "infer")
    assert out is x or np.array_equal(out, x)
    assert mask is None
    rng = Rng(4)
    mean = np.mean([dropout_forward(spec, x, "train", rng)[0] for _ in range(1000)], axis=0)
    assert abs(mean.mean() - 2.0) / 2.0 < 0.02
    assert np.all(np.abs(mean - 2.0) / 2.0 < 0.2)


def test_dropout_mask_scaling():
    out, mask = dropout_forward(DropoutSpec(0.5), np.ones(100), "train", Rng(1))
    assert set(np.unique(mask)) <= {0.0, 2.0}
    assert np.array_equal(out, mask)


def test_glorot_bounds_and_zero_bias():
    net = Network.initialise(default_network_spec((3, 16, 16), hidden=8), 3)
    conv = net.layers[0]
    bound = np.sqrt(6.0 / (3 * 9 + 16 * 9))
    assert np.all(np.abs(conv.params["weight"]) < bound)
    assert np.abs(conv.params["weight"]).max() > 0.9 * bound
    assert np.all(conv.params["bias"] == 0.0)
    again = Network.initialise(default_network_spec((3, 16, 16), hidden=8), 3)
    for (k, a, _), (_, b, _) in zip(net.parameters(), again.parameters()):
        assert np.array_equal(a, b), k


def test_pool_forward_values():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    out, _ = pool_forward(PoolSpec(2, 2, 2, 2, "average"), x)
    assert out[0, 0].tolist() == [[2.5, 4.5], [10.5, 12.5]]
    out, _ = pool_forward(PoolSpec(2, 2, 2, 2, "max"), x)
    assert out[0, 0].tolist() == [[5.0, 7.0], [13.0, 15.0]]


def test_state_dict_round_trip():
    spec = default_network_spec((3, 16, 16), hidden=8)
    a = Network.initialise(spec, 1)
    b = Network(spec)
    b.load_state_dict(a.state_dict())
    x = np.random.default_rng(0).random((2, 3, 16, 16))
    assert np.array_equal(a.forward(x), b.forward(x))
    bad = a.state_dict()
    bad["0.weight"] = bad["0.weight"][:1]
    with pytest.raises(ShapeError):
        b.load_state_dict(bad)
