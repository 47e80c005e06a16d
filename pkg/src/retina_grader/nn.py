"""CNN layers with exact backward passes, and the network that chains them.

Activations are float64 ``np.ndarray`` in [batch, channel, height, width]
order for spatial layers and [batch, features] after ``flatten``. Each layer
object owns its parameters, their gradients, and the activations cached by a
training-mode forward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence, Union

import numpy as np

from . import kernels
from .errors import ShapeError, UsageError
from .tensor import Rng, random_uniform

SEVERITY_CLASSES = 5


# ---------------------------------------------------------------- layer specs


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride_h: int = 1
    stride_w: int = 1
    padding: int = 0

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel_h", "kernel_w", "stride_h", "stride_w"):
            if getattr(self, name) < 1:
                raise ShapeError(f"conv {name} must be >= 1")
        if self.padding < 0:
            raise ShapeError("conv padding must be >= 0")

    def output_shape(self, shape):
        if len(shape) != 3:
            raise ShapeError(f"conv needs a (channels, height, width) input, got {tuple(shape)}")
        c, h, w = shape
        if c != self.in_channels:
            raise ShapeError(f"conv expects {self.in_channels} channels, got {c}")
        oh = (h + 2 * self.padding - self.kernel_h) // self.stride_h + 1
        ow = (w + 2 * self.padding - self.kernel_w) // self.stride_w + 1
        if h + 2 * self.padding < self.kernel_h or w + 2 * self.padding < self.kernel_w:
            raise ShapeError(f"conv kernel {self.kernel_h}x{self.kernel_w} exceeds input {h}x{w}")
        return (self.out_channels, oh, ow)

    def token(self):
        return (
            f"conv:{self.out_channels}:{self.kernel_h}x{self.kernel_w}"
            f":{self.stride_h}x{self.stride_w}:{self.padding}"
        )


@dataclass(frozen=True)
class PoolSpec:
    """Pooling window ``f_y`` rows by ``f_x`` columns moved by ``s_y``/``s_x``."""

    f_x: int
    f_y: int
    s_x: int
    s_y: int
    mode: str = "max"

    def __post_init__(self):
        if min(self.f_x, self.f_y, self.s_x, self.s_y) < 1:
            raise ShapeError("pool window and stride must be >= 1")
        if self.mode not in ("max", "average"):
            raise UsageError(f"pool mode must be 'max' or 'average', not {self.mode!r}")

    def output_shape(self, shape):
        if len(shape) != 3:
            raise ShapeError(f"pooling needs a (channels, height, width) input, got {tuple(shape)}")
        c, h, w = shape
        if h < self.f_y or w < self.f_x:
            raise ShapeError(f"pool window {self.f_y}x{self.f_x} larger than input {h}x{w}")
        return (c, (h - self.f_y) // self.s_y + 1, (w - self.f_x) // self.s_x + 1)

    def token(self):
        kind = "maxpool" if self.mode == "max" else "avgpool"
        return f"{kind}:{self.f_y}x{self.f_x}:{self.s_y}x{self.s_x}"


@dataclass(frozen=True)
class DenseSpec:
    in_features: int
    out_features: int

    def __post_init__(self):
        if self.in_features < 1 or self.out_features < 1:
            raise ShapeError("dense feature counts must be >= 1")

    def output_shape(self, shape):
        if len(shape) != 1 or shape[0] != self.in_features:
            raise ShapeError(f"dense expects ({self.in_features},) features, got {shape}")
        return (self.out_features,)

    def token(self):
        return f"dense:{self.out_features}"


@dataclass(frozen=True)
class DropoutSpec:
    rate: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise UsageError(f"dropout rate must be in [0, 1), got {self.rate}")

    def output_shape(self, shape):
        return tuple(shape)

    def token(self):
        return f"dropout:{self.rate!r}"


@dataclass(frozen=True)
class ReLUSpec:
    def output_shape(self, shape):
        return tuple(shape)

    def token(self):
        return "relu"


@dataclass(frozen=True)
class FlattenSpec:
    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def token(self):
        return "flatten"


@dataclass(frozen=True)
class SoftmaxSpec:
    def output_shape(self, shape):
        if len(shape) != 1 or shape[0] < 2:
            raise ShapeError(f"softmax needs a feature vector of >= 2 classes, got {shape}")
        return tuple(shape)

    def token(self):
        return "softmax"


LayerSpec = Union[ConvSpec, PoolSpec, DenseSpec, DropoutSpec, ReLUSpec, FlattenSpec, SoftmaxSpec]


def _pair(text):
    parts = text.lower().split("x")
    if len(parts) == 1:
        return int(parts[0]), int(parts[0])
    if len(parts) == 2:
        return int(parts[0]), int(parts[1])
    raise ValueError(text)


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer configuration for inputs of shape ``input_shape`` (c, h, w)."""

    input_shape: tuple
    layers: tuple
    class_count: int = SEVERITY_CLASSES

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.shapes()

    def shapes(self):
        """Per-layer output shapes (without batch); raises on any incompatibility."""
        shape = self.input_shape
        if len(shape) != 3 or min(shape) < 1:
            raise ShapeError(f"input shape must be (channels, height, width), got {shape}")
        out = []
        for i, spec in enumerate(self.layers):
            try:
                shape = spec.output_shape(shape)
            except (ShapeError, UsageError) as exc:
                raise ShapeError(f"layer {i} ({spec.token()}): {exc}") from None
            out.append(shape)
        if not self.layers:
            raise ShapeError("network has no layers")
        if out[-1] != (self.class_count,):
            raise ShapeError(f"final layer produces {out[-1]}, expected ({self.class_count},)")
        return out

    def with_dropout(self, rate):
        layers = [DropoutSpec(rate) if isinstance(s, DropoutSpec) else s for s in self.layers]
        return replace(self, layers=tuple(layers))

    def to_text(self):
        c, h, w = self.input_shape
        tokens = ", ".join(s.token() for s in self.layers)
        return f"{c}x{h}x{w} | {tokens} | {self.class_count}"

    @classmethod
    def from_tokens(cls, input_shape, tokens, class_count=SEVERITY_CLASSES):
        """Build a spec from layer tokens, inferring in-channels/in-features.

        Tokens: ``conv:OUT:KHxKW:SHxSW:PAD``, ``maxpool:FYxFX:SYxSX``,
        ``avgpool:...``, ``relu``, ``flatten``, ``dense:OUT``,
        ``dropout:RATE``, ``softmax``. A single number stands for a square
        pair, so ``conv:16:3:1:1`` is a 3x3 stride-1 convolution.
        """
        shape = tuple(int(d) for d in input_shape)
        layers = []
        for i, raw in enumerate(tokens):
            tok = raw.strip().lower()
            kind, *args = tok.split(":")
            try:
                if kind == "conv":
                    out = int(args[0])
                    kh, kw = _pair(args[1]) if len(args) > 1 else (3, 3)
                    sh, sw = _pair(args[2]) if len(args) > 2 else (1, 1)
                    pad = int(args[3]) if len(args) > 3 else 0
                    spec = ConvSpec(shape[0], out, kh, kw, sh, sw, pad)
                elif kind in ("maxpool", "avgpool"):
                    fy, fx = _pair(args[0]) if args else (2, 2)
                    sy, sx = _pair(args[1]) if len(args) > 1 else (fy, fx)
                    spec = PoolSpec(fx, fy, sx, sy, "max" if kind == "maxpool" else "average")
                elif kind == "dense":
                    if len(shape) != 1:
                        raise ShapeError("dense needs a flattened input (add 'flatten')")
                    spec = DenseSpec(shape[0], int(args[0]))
                elif kind == "dropout":
                    spec = DropoutSpec(float(args[0]) if args else 0.0)
                elif kind == "relu" and not args:
                    spec = ReLUSpec()
                elif kind == "flatten" and not args:
                    spec = FlattenSpec()
                elif kind == "softmax" and not args:
                    spec = SoftmaxSpec()
                else:
                    raise UsageError(f"unknown layer token {raw.strip()!r}")
            except (ShapeError, UsageError) as exc:
                raise type(exc)(f"layer {i} ({raw.strip()}): {exc}") from None
            except (IndexError, ValueError):
                raise UsageError(f"malformed layer token {raw.strip()!r}") from None
            layers.append(spec)
            try:
                shape = spec.output_shape(shape)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({raw.strip()}): {exc}") from None
        return cls(input_shape, tuple(layers), class_count)

    @classmethod
    def from_text(cls, text):
        try:
            shape_part, layer_part, count_part = (p.strip() for p in text.split("|"))
            c, h, w = (int(d) for d in shape_part.lower().split("x"))
            count = int(count_part)
        except ValueError:
            raise UsageError(f"malformed network description {text!r}") from None
        return cls.from_tokens((c, h, w), layer_part.split(","), count)


def default_network_spec(input_shape=(3, 128, 128), class_count=SEVERITY_CLASSES,
                         dropout_rate=0.25, hidden=128):
    """Three conv/ReLU/maxpool stages, a hidden dense layer, dropout, softmax."""
    tokens = [
        "conv:16:3:1:1", "relu", "maxpool:2:2",
        "conv:32:3:1:1", "relu", "maxpool:2:2",
        "conv:64:3:1:1", "relu", "maxpool:2:2",
        "flatten", f"dense:{hidden}", "relu", f"dropout:{dropout_rate!r}",
        f"dense:{class_count}", "softmax",
    ]
    return NetworkSpec.from_tokens(input_shape, tokens, class_count)


# ------------------------------------------------------- functional layer ops


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(cached_input, upstream):
    """Gradient at exactly zero is taken as zero."""
    return np.where(np.asarray(cached_input) > 0.0, upstream, 0.0)


@dataclass
class PoolCache:
    input_shape: tuple
    argmax: np.ndarray | None


def _as_batch4(x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeError(f"expected a [batch, channel, height, width] array, got shape {x.shape}")
    return x


def pool_forward(spec: PoolSpec, x):
    """Max or average pooling; windows that would overrun an edge are dropped."""
    x = _as_batch4(x)
    spec.output_shape(x.shape[1:])
    if spec.mode == "max":
        out, argmax = kernels.max_pool_forward(x, spec.f_y, spec.f_x, spec.s_y, spec.s_x)
        return out, PoolCache(x.shape, argmax)
    out = kernels.avg_pool_forward(x, spec.f_y, spec.f_x, spec.s_y, spec.s_x)
    return out, PoolCache(x.shape, None)


def pool_backward(spec: PoolSpec, cache: PoolCache, upstream):
    upstream = _as_batch4(upstream)
    n, c, h, w = cache.input_shape
    expected = (n,) + spec.output_shape((c, h, w))
    if upstream.shape != expected:
        raise UsageError(f"upstream gradient {upstream.shape} does not match pool output {expected}")
    if spec.mode == "max":
        if cache.argmax is None:
            raise UsageError("max-pool backward needs the argmax cache of a max forward")
        return kernels.max_pool_backward(upstream, cache.argmax, h, w)
    return kernels.avg_pool_backward(upstream, h, w, spec.f_y, spec.f_x, spec.s_y, spec.s_x)


def softmax(scores):
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[1] < 2:
        raise ShapeError(f"softmax expects [batch, classes>=2], got {scores.shape}")
    z = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def dropout_forward(spec: DropoutSpec, x, mode, rng: Rng | None = None):
    """Inverted dropout. Returns (output, mask); the mask already holds 1/(1-rate)."""
    x = np.asarray(x, dtype=np.float64)
    if mode == "infer" or spec.rate == 0.0:
        return x, None
    if mode != "train":
        raise UsageError(f"mode must be 'train' or 'infer', not {mode!r}")
    if rng is None:
        raise UsageError("training-mode dropout needs an Rng")
    keep = rng.uniform(x.size).reshape(x.shape) >= spec.rate
    mask = keep * (1.0 / (1.0 - spec.rate))
    return x * mask, mask


def dropout_backward(mask, upstream):
    if mask is None:
        return upstream
    return upstream * mask


# ------------------------------------------------------------------- layers


class Layer:
    """Base layer. Parameterless layers keep empty ``params``/``grads``."""

    kind = "layer"

    def __init__(self, spec):
        self.spec = spec
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.cache = None

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, upstream):
        raise NotImplementedError

    def _cached(self):
        if self.cache is None:
            raise UsageError(f"{self.kind} backward called without a training-mode forward")
        return self.cache

    def zero_grad(self):
        for name, p in self.params.items():
            self.grads[name] = np.zeros_like(p)

    def __repr__(self):
        return f"{type(self).__name__}({self.spec.token()})"


def _glorot(shape, fan_in, fan_out, rng):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return random_uniform(shape, -bound, bound, rng).numpy()


class Conv2D(Layer):
    """Cross-correlation (no kernel flip) with per-filter bias."""

    kind = "conv"

    def __init__(self, spec: ConvSpec, rng: Rng | None = None):
        super().__init__(spec)
        s = spec
        wshape = (s.out_channels, s.in_channels, s.kernel_h, s.kernel_w)
        area = s.kernel_h * s.kernel_w
        if rng is None:
            self.params["weight"] = np.zeros(wshape)
        else:
            self.params["weight"] = _glorot(wshape, s.in_channels * area, s.out_channels * area, rng)
        self.params["bias"] = np.zeros(s.out_channels)
        self.zero_grad()

    def forward(self, x, train=False, rng=None):
        s = self.spec
        x = _as_batch4(x)
        _, oh, ow = s.output_shape(x.shape[1:])
        n = x.shape[0]
        cols = kernels.im2col(x, s.kernel_h, s.kernel_w, s.stride_h, s.stride_w, s.padding)
        w2 = self.params["weight"].reshape(s.out_channels, -1)
        out = w2 @ cols + self.params["bias"][:, None]
        out = np.ascontiguousarray(out.reshape(s.out_channels, n, oh, ow).transpose(1, 0, 2, 3))
        self.cache = (x.shape, cols) if train else None
        return out

    def backward(self, upstream, input_grad=True):
        s = self.spec
        in_shape, cols = self._cached()
        n, c, h, w = in_shape
        expected = (n,) + s.output_shape((c, h, w))
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != expected:
            raise ShapeError(f"conv upstream gradient {upstream.shape} != output {expected}")
        g2 = upstream.transpose(1, 0, 2, 3).reshape(s.out_channels, -1)
        self.grads["weight"] = (g2 @ cols.T).reshape(self.params["weight"].shape)
        self.grads["bias"] = g2.sum(axis=1)
        if not input_grad:
            return None
        w2 = self.params["weight"].reshape(s.out_channels, -1)
        dcols = np.ascontiguousarray(w2.T @ g2)
        return kernels.col2im(dcols, n, c, h, w, s.kernel_h, s.kernel_w,
                              s.stride_h, s.stride_w, s.padding)


class Dense(Layer):
    """``out = x @ W + b`` with W of shape (in_features, out_features)."""

    kind = "dense"

    def __init__(self, spec: DenseSpec, rng: Rng | None = None):
        super().__init__(spec)
        wshape = (spec.in_features, spec.out_features)
        if rng is None:
            self.params["weight"] = np.zeros(wshape)
        else:
            self.params["weight"] = _glorot(wshape, spec.in_features, spec.out_features, rng)
        self.params["bias"] = np.zeros(spec.out_features)
        self.zero_grad()

    def forward(self, x, train=False, rng=None):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.spec.in_features:
            raise ShapeError(f"dense expects [batch, {self.spec.in_features}], got {x.shape}")
        self.cache = x if train else None
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, upstream):
        x = self._cached()
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != (x.shape[0], self.spec.out_features):
            raise ShapeError(f"dense upstream gradient has shape {upstream.shape}")
        self.grads["weight"] = x.T @ upstream
        self.grads["bias"] = upstream.sum(axis=0)
        return upstream @ self.params["weight"].T


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False, rng=None):
        x = np.asarray(x, dtype=np.float64)
        self.cache = x if train else None
        return relu(x)

    def backward(self, upstream):
        return relu_backward(self._cached(), upstream)


class Pool2D(Layer):
    kind = "pool"

    def forward(self, x, train=False, rng=None):
        out, cache = pool_forward(self.spec, x)
        self.cache = cache if train else None
        return out

    def backward(self, upstream):
        return pool_backward(self.spec, self._cached(), upstream)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, train=False, rng=None):
        x = np.asarray(x, dtype=np.float64)
        self.cache = x.shape if train else None
        return x.reshape(x.shape[0], -1)

    def backward(self, upstream):
        return np.asarray(upstream).reshape(self._cached())


class Dropout(Layer):
    kind = "dropout"

    def forward(self, x, train=False, rng=None):
        out, mask = dropout_forward(self.spec, x, "train" if train else "infer", rng)
        self.cache = (mask,) if train else None
        return out

    def backward(self, upstream):
        (mask,) = self._cached()
        return dropout_backward(mask, upstream)


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x, train=False, rng=None):
        p = softmax(x)
        self.cache = p if train else None
        return p

    def backward(self, upstream):
        p = self._cached()
        upstream = np.asarray(upstream, dtype=np.float64)
        return p * (upstream - (upstream * p).sum(axis=1, keepdims=True))


_LAYER_TYPES = {
    ConvSpec: Conv2D,
    DenseSpec: Dense,
    ReLUSpec: ReLU,
    PoolSpec: Pool2D,
    FlattenSpec: Flatten,
    DropoutSpec: Dropout,
    SoftmaxSpec: Softmax,
}


def build_layer(spec, rng=None):
    cls = _LAYER_TYPES[type(spec)]
    if cls in (Conv2D, Dense):
        return cls(spec, rng)
    return cls(spec)


class Network:
    """Instantiated :class:`NetworkSpec`: layers, parameters and caches."""

    def __init__(self, spec: NetworkSpec, rng: Rng | None = None):
        self.spec = spec
        self.layers = [build_layer(s, rng) for s in spec.layers]

    @classmethod
    def initialise(cls, spec: NetworkSpec, seed: int):
        """Glorot-uniform weights drawn from ``Rng(seed)``, zero biases."""
        return cls(spec, Rng(seed))

    def forward(self, x, mode="infer", rng: Rng | None = None):
        if mode not in ("train", "infer"):
            raise UsageError(f"mode must be 'train' or 'infer', not {mode!r}")
        train = mode == "train"
        out = np.asarray(x, dtype=np.float64)
        if out.ndim == 3:
            out = out[None]
        expected = self.spec.input_shape
        if out.shape[1:] != expected:
            raise ShapeError(f"batch has sample shape {out.shape[1:]}, network expects {expected}")
        for i, layer in enumerate(self.layers):
            try:
                out = layer.forward(out, train=train, rng=rng)
            except (ShapeError, UsageError) as exc:
                raise type(exc)(f"layer {i} ({layer.spec.token()}): {exc}") from None
        return out

    def backward(self, upstream, from_scores=False, input_grad=True):
        """Backpropagate ``upstream`` and return the input gradient.

        With ``from_scores`` the gradient is taken w.r.t. the pre-softmax
        scores and the trailing softmax layer is skipped. ``input_grad=False``
        lets a leading convolution skip its (unused) input gradient and
        return None.
        """
        layers = self.layers
        if from_scores:
            if not isinstance(layers[-1], Softmax):
                raise UsageError("from_scores requires a trailing softmax layer")
            layers = layers[:-1]
        grad = upstream
        for i in range(len(layers) - 1, -1, -1):
            try:
                if i == 0 and not input_grad and isinstance(layers[0], Conv2D):
                    return layers[0].backward(grad, input_grad=False)
                grad = layers[i].backward(grad)
            except (ShapeError, UsageError) as exc:
                raise type(exc)(f"layer {i} ({layers[i].spec.token()}): {exc}") from None
        return grad

    def parameters(self):
        """(key, param, grad) triples; key is ``"<layer index>.<name>"``."""
        out = []
        for i, layer in enumerate(self.layers):
            for name in layer.params:
                out.append((f"{i}.{name}", layer.params[name], layer.grads[name]))
        return out

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def clear_cache(self):
        for layer in self.layers:
            layer.cache = None

    def state_dict(self):
        return {key: p.copy() for key, p, _ in self.parameters()}

    def load_state_dict(self, state):
        for i, layer in enumerate(self.layers):
            for name, p in layer.params.items():
                key = f"{i}.{name}"
                if key not in state:
                    raise UsageError(f"state is missing parameter {key}")
                value = np.asarray(state[key], dtype=np.float64)
                if value.shape != p.shape:
                    raise ShapeError(f"parameter {key}: shape {value.shape} != {p.shape}")
                layer.params[name] = value.copy()
        self.zero_grad()

    def set_dropout(self, rate):
        """Change every dropout layer's rate in place."""
        self.spec = self.spec.with_dropout(rate)
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dropout):
                layer.spec = self.spec.layers[i]

    def predict_proba(self, x, batch_size=32):
        x = np.asarray(x, dtype=np.float64)
        chunks = [self.forward(x[i : i + batch_size], "infer") for i in range(0, len(x), batch_size)]
        return np.concatenate(chunks, axis=0)


def network_forward(net: Network, batch, mode="infer", rng: Rng | None = None):
    return net.forward(batch, mode, rng)


def conv_forward(layer: Conv2D, x, train=True):
    return layer.forward(x, train=train)


def conv_backward(layer: Conv2D, upstream):
    return layer.backward(upstream)


def dense_forward(layer: Dense, x, train=True):
    return layer.forward(x, train=train)


def dense_backward(layer: Dense, upstream):
    return layer.backward(upstream)
