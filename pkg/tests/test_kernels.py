import numpy as np
import pytest

from retina_grader import kernels
from retina_grader.errors import UsageError

BACKENDS = kernels.available()


def naive_im2col(x, kh, kw, sh, sw, pad):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // sh + 1
    ow = (w + 2 * pad - kw) // sw + 1
    cols = np.zeros((c * kh * kw, n * oh * ow))
    for ci in range(c):
        for ki in range(kh):
            for kj in range(kw):
                row = (ci * kh + ki) * kw + kj
                for b in range(n):
                    for i in range(oh):
                        for j in range(ow):
                            cols[row, (b * oh + i) * ow + j] = xp[b, ci, i * sh + ki, j * sw + kj]
    return cols


@pytest.mark.parametrize("geom", [(3, 3, 1, 1, 1), (2, 3, 2, 1, 0), (3, 2, 2, 3, 2), (1, 1, 1, 1, 0)])
def test_im2col_matches_naive(backend, geom):
    kh, kw, sh, sw, pad = geom
    x = np.random.default_rng(0).standard_normal((2, 3, 7, 8))
    assert np.array_equal(kernels.im2col(x, kh, kw, sh, sw, pad), naive_im2col(x, kh, kw, sh, sw, pad))


@pytest.mark.parametrize("geom", [(3, 3, 1, 1, 1), (2, 3, 2, 1, 0), (3, 2, 2, 3, 2)])
def test_col2im_is_adjoint_of_im2col(backend, geom):
    kh, kw, sh, sw, pad = geom
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 7, 8))
    cols = kernels.im2col(x, kh, kw, sh, sw, pad)
    y = rng.standard_normal(cols.shape)
    back = kernels.col2im(y, 2, 3, 7, 8, kh, kw, sh, sw, pad)
    assert np.isclose(np.sum(cols * y), np.sum(x * back), rtol=1e-12)


def _cases(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 9, 11))
    x[0, 0, :2, :2] = 1.0  # a tie inside a window
    bits = (rng.random((13, 10)) < 0.5).astype(np.uint8)
    se = (rng.random((3, 4)) < 0.6).astype(np.uint8)
    se[1, 2] = 1
    img = rng.random((13, 10))
    return x, bits, se, img


def _outputs(name, seed):
    k = kernels.BACKENDS[name]
    x, bits, se, img = _cases(seed)
    mp, idx = k.max_pool_forward(x, 2, 3, 2, 2)
    g = np.random.default_rng(seed + 100).standard_normal(mp.shape)
    ap = k.avg_pool_forward(x, 3, 2, 2, 1)
    ga = np.random.default_rng(seed + 200).standard_normal(ap.shape)
    cols = k.im2col(x, 3, 3, 2, 1, 1)
    return [
        mp, idx, k.max_pool_backward(g, idx, 9, 11), ap, k.avg_pool_backward(ga, 9, 11, 3, 2, 2, 1),
        cols, k.col2im(cols, 2, 3, 9, 11, 3, 3, 2, 1, 1),
        k.binary_erode(bits, se, 1, 2, False), k.binary_erode(bits, se, 0, 3, True),
        k.binary_dilate(bits, se, 2, 0, False), k.binary_dilate(bits, se, 1, 1, True),
        k.gray_erode(img, se, 1, 2, 1.0), k.gray_dilate(img, se, 2, 1, 0.0),
    ]


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled backend not built")
@pytest.mark.parametrize("seed", range(5))
def test_backends_bit_identical(seed):
    a = _outputs("python", seed)
    b = _outputs("cython", seed)
    for x, y in zip(a, b):
        assert x.dtype == y.dtype
        assert np.array_equal(x, y)


def test_max_pool_tie_goes_to_first_in_scan_order(backend):
    x = np.zeros((1, 1, 2, 2))
    out, idx = kernels.max_pool_forward(x, 2, 2, 2, 2)
    assert out[0, 0, 0, 0] == 0.0 and idx[0, 0, 0, 0] == 0
    x = np.array([[[[1.0, 5.0], [5.0, 2.0]]]])
    _, idx = kernels.max_pool_forward(x, 2, 2, 2, 2)
    assert idx[0, 0, 0, 0] == 1


def test_overhanging_windows_are_dropped(backend):
    x = np.arange(25.0).reshape(1, 1, 5, 5)
    out, _ = kernels.max_pool_forward(x, 2, 2, 2, 2)
    assert out.shape == (1, 1, 2, 2)
    assert out[0, 0].tolist() == [[6.0, 8.0], [16.0, 18.0]]


def test_use_switches_and_rejects_unknown():
    prev = kernels.use("python")
    try:
        assert kernels.active() == "python"
        with pytest.raises(UsageError):
            kernels.use("fortran")
    finally:
        kernels.use(prev)
