"""Backend selection for the hot kernels.

The compiled Cython module is used when it was built; otherwise the numpy
fallback is used. ``RETINA_GRADER_BACKEND`` overrides the choice at import
time (``auto``, ``cython`` or ``python``) and :func:`use` switches at run
time, which the benchmark and the backend-equivalence tests rely on.
"""

import os

from . import _kernels_py
from .errors import UsageError

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

BACKENDS = {"python": _kernels_py}
if _ckernels is not None:
    BACKENDS["cython"] = _ckernels

_active = _kernels_py


def available():
    return sorted(BACKENDS)


def use(name="auto"):
    """Select a backend by name and return the previously active name."""
    global _active
    prev = _active.NAME
    if name == "auto":
        _active = BACKENDS.get("cython", _kernels_py)
    elif name in BACKENDS:
        _active = BACKENDS[name]
    else:
        raise UsageError(f"kernel backend {name!r} unavailable; have {available()}")
    return prev


def active():
    return _active.NAME


use(os.environ.get("RETINA_GRADER_BACKEND", "auto"))


def im2col(x, kh, kw, sh, sw, pad):
    return _active.im2col(x, kh, kw, sh, sw, pad)


def col2im(cols, n, c, h, w, kh, kw, sh, sw, pad):
    return _active.col2im(cols, n, c, h, w, kh, kw, sh, sw, pad)


def max_pool_forward(x, fy, fx, sy, sx):
    return _active.max_pool_forward(x, fy, fx, sy, sx)


def max_pool_backward(grad, argmax, h, w):
    return _active.max_pool_backward(grad, argmax, h, w)


def avg_pool_forward(x, fy, fx, sy, sx):
    return _active.avg_pool_forward(x, fy, fx, sy, sx)


def avg_pool_backward(grad, h, w, fy, fx, sy, sx):
    return _active.avg_pool_backward(grad, h, w, fy, fx, sy, sx)


def binary_erode(a, se, ay, ax, outside):
    return _active.binary_erode(a, se, ay, ax, int(outside))


def binary_dilate(a, se, ay, ax, outside):
    return _active.binary_dilate(a, se, ay, ax, int(outside))


def gray_erode(img, se, ay, ax, pad=1.0):
    return _active.gray_erode(img, se, ay, ax, float(pad))


def gray_dilate(img, se, ay, ax, pad=0.0):
    return _active.gray_dilate(img, se, ay, ax, float(pad))
