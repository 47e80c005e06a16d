"""Pure numpy implementations of the hot kernels.

Every function here has a twin in ``_ckernels.pyx`` with the same signature.
Accumulations are performed in the same order in both, so the two backends
agree bit-for-bit rather than merely within rounding.

Layout conventions:
  images/activations are [N, C, H, W] float64, C-contiguous;
  im2col columns are [C*kh*kw, N*oh*ow], rows ordered (c, ki, kj) and
  columns ordered (n, oh, ow);
  pool argmax is the flat index ``row * W + col`` inside the input plane;
  binary planes are uint8 {0, 1}.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided

NAME = "python"


def conv_out_size(size, kernel, stride, pad):
    return (size + 2 * pad - kernel) // stride + 1


def im2col(x, kh, kw, sh, sw, pad):
    n, c, h, w = x.shape
    oh = conv_out_size(h, kh, sh, pad)
    ow = conv_out_size(w, kw, sw, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    s = x.strides
    win = as_strided(
        x,
        shape=(c, kh, kw, n, oh, ow),
        strides=(s[1], s[2], s[3], s[0], s[2] * sh, s[3] * sw),
        writeable=False,
    )
    return np.ascontiguousarray(win).reshape(c * kh * kw, n * oh * ow)


def col2im(cols, n, c, h, w, kh, kw, sh, sw, pad):
    oh = conv_out_size(h, kh, sh, pad)
    ow = conv_out_size(w, kw, sw, pad)
    cols = cols.reshape(c, kh, kw, n, oh, ow)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for ki in range(kh):
        for kj in range(kw):
            dst = out[:, :, ki : ki + sh * (oh - 1) + 1 : sh, kj : kj + sw * (ow - 1) + 1 : sw]
            dst += cols[:, ki, kj].transpose(1, 0, 2, 3)
    if pad:
        out = out[:, :, pad : pad + h, pad : pad + w]
    return np.ascontiguousarray(out)


def pool_out_size(size, window, stride):
    return (size - window) // stride + 1


def _window(x, m, k, oh, ow, sy, sx):
    return x[:, :, m : m + sy * (oh - 1) + 1 : sy, k : k + sx * (ow - 1) + 1 : sx]


def max_pool_forward(x, fy, fx, sy, sx):
    n, c, h, w = x.shape
    oh = pool_out_size(h, fy, sy)
    ow = pool_out_size(w, fx, sx)
    rows = np.arange(oh)[:, None] * sy
    cols = np.arange(ow)[None, :] * sx
    best = _window(x, 0, 0, oh, ow, sy, sx).copy()
    idx = np.broadcast_to(rows * w + cols, best.shape).copy()
    for m in range(fy):
        for k in range(fx):
            if m == 0 and k == 0:
                continue
            v = _window(x, m, k, oh, ow, sy, sx)
            better = v > best
            best = np.where(better, v, best)
            idx = np.where(better, (rows + m) * w + (cols + k), idx)
    return best, idx.astype(np.int64)


def max_pool_backward(grad, argmax, h, w):
    n, c = grad.shape[:2]
    out = np.zeros((n * c, h * w))
    g = grad.reshape(n * c, -1)
    a = argmax.reshape(n * c, -1)
    plane = np.repeat(np.arange(n * c), g.shape[1])
    np.add.at(out, (plane, a.ravel()), g.ravel())
    return out.reshape(n, c, h, w)


def avg_pool_forward(x, fy, fx, sy, sx):
    n, c, h, w = x.shape
    oh = pool_out_size(h, fy, sy)
    ow = pool_out_size(w, fx, sx)
    acc = np.zeros((n, c, oh, ow))
    for m in range(fy):
        for k in range(fx):
            acc += _window(x, m, k, oh, ow, sy, sx)
    return acc / (fx * fy)


def avg_pool_backward(grad, h, w, fy, fx, sy, sx):
    n, c, oh, ow = grad.shape
    out = np.zeros((n, c, h, w))
    share = grad / (fx * fy)
    for m in range(fy):
        for k in range(fx):
            _window(out, m, k, oh, ow, sy, sx)[...] += share
    return out


def _offsets(se, ay, ax):
    ys, xs = np.nonzero(se)
    return list(zip((ys - ay).tolist(), (xs - ax).tolist()))


def _shifted(a, dy, dx, fill):
    """out[y, x] = a[y + dy, x + dx], ``fill`` where that falls outside."""
    h, w = a.shape
    out = np.full_like(a, fill)
    y0, y1 = max(0, -dy), min(h, h - dy)
    x0, x1 = max(0, -dx), min(w, w - dx)
    if y0 < y1 and x0 < x1:
        out[y0:y1, x0:x1] = a[y0 + dy : y1 + dy, x0 + dx : x1 + dx]
    return out


def binary_erode(a, se, ay, ax, outside):
    out = np.ones(a.shape, dtype=np.uint8)
    for dy, dx in _offsets(se, ay, ax):
        out &= _shifted(a, dy, dx, outside)
    return out


def binary_dilate(a, se, ay, ax, outside):
    out = np.zeros(a.shape, dtype=np.uint8)
    for dy, dx in _offsets(se, ay, ax):
        out |= _shifted(a, -dy, -dx, outside)
    return out


def gray_erode(img, se, ay, ax, pad):
    out = np.full(img.shape, np.inf)
    for dy, dx in _offsets(se, ay, ax):
        np.minimum(out, _shifted(img, dy, dx, pad), out=out)
    return out


def gray_dilate(img, se, ay, ax, pad):
    out = np.full(img.shape, -np.inf)
    for dy, dx in _offsets(se, ay, ax):
        np.maximum(out, _shifted(img, -dy, -dx, pad), out=out)
    return out
