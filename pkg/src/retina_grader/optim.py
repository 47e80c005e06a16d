"""Losses and the plain SGD update."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import LabelError, NumericError, ShapeError, UsageError
from .nn import Network
from .tensor import Rng

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class SGDConfig:
    learning_rate: float

    def __post_init__(self):
        lr = self.learning_rate
        # zero is accepted: it is the no-op baseline used in tests and searches
        if not math.isfinite(lr) or lr < 0:
            raise UsageError(f"learning rate must be finite and >= 0, got {lr}")


@dataclass
class LossValue:
    value: float
    per_sample: list = field(default_factory=list)


def quadratic_loss(y: float, y_true: float) -> float:
    """``0.5 * (y - y_true)**2``; its derivative in ``y`` is ``y - y_true``."""
    d = y - y_true
    return 0.5 * d * d


def quadratic_loss_grad(y: float, y_true: float) -> float:
    return y - y_true


def cross_entropy(probs, labels):
    """Mean negative log-likelihood and its gradient w.r.t. pre-softmax scores.

    Returns ``(LossValue, grad)`` with ``grad = (probs - onehot) / batch``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2:
        raise ShapeError(f"probabilities must be [batch, classes], got {probs.shape}")
    n, k = probs.shape
    if labels.shape != (n,):
        raise ShapeError(f"{labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    if not np.issubdtype(labels.dtype, np.integer):
        raise LabelError("labels must be integer class indices")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelError(f"labels must lie in 0..{k - 1}")
    if n and np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6):
        raise UsageError("probability rows must sum to 1 within 1e-6")
    rows = np.arange(n)
    picked = np.maximum(probs[rows, labels], PROB_FLOOR)
    per_sample = -np.log(picked)
    grad = probs.copy()
    grad[rows, labels] -= 1.0
    grad /= n
    return LossValue(float(per_sample.mean()), per_sample.tolist()), grad


def sgd_step(config: SGDConfig, params, grads):
    """``p <- p - lr * g`` in place for each pair, then zero the gradients."""
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"parameter shape {p.shape} != gradient shape {g.shape}")
    lr = config.learning_rate
    for p, g in zip(params, grads):
        p -= lr * g
        g[...] = 0.0
    return params


def train_step(net: Network, batch, labels, sgd: SGDConfig, rng: Rng):
    """One forward/backward/update. Returns (pre-update loss, batch accuracy)."""
    labels = np.asarray(labels)
    probs = net.forward(batch, "train", rng)
    if not np.all(np.isfinite(probs)):
        raise NumericError("non-finite network output; lower the learning rate")
    loss, grad = cross_entropy(probs, labels)
    net.backward(grad, from_scores=True, input_grad=False)
    triples = net.parameters()
    sgd_step(sgd, [p for _, p, _ in triples], [g for _, _, g in triples])
    net.clear_cache()
    accuracy = float(np.mean(probs.argmax(axis=1) == labels))
    return loss, accuracy
