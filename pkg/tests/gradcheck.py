"""Central finite differences shared by the gradient tests."""

import numpy as np

STEP = 1e-5
REL_TOL = 1e-4
# below this magnitude an entry is compared on an absolute scale
FLOOR = 1e-6


def numeric_grad(f, x, step=STEP):
    """d f / d x for scalar f by central differences; x is perturbed in place."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return g


def rel_error(analytic, numeric):
    """Largest entrywise |a - n| / max(|a|, |n|, FLOOR)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), FLOOR)
    return float(np.max(np.abs(a - n) / denom))


def layer_error(layer, x, seed, params=True):
    """Worst gradient error of L = sum(forward(x) * R) over the input and every parameter."""
    r = np.random.default_rng(seed + 1000)
    out = layer.forward(x, train=True)
    weights = r.standard_normal(out.shape)
    grad_in = layer.backward(weights)

    def loss():
        return float(np.sum(layer.forward(x, train=False) * weights))

    errors = [rel_error(grad_in, numeric_grad(loss, x))]
    if params:
        for name, p in layer.params.items():
            errors.append(rel_error(layer.grads[name], numeric_grad(loss, p)))
    return max(errors)


def spread(shape, rng):
    """Distinct values at least 1e-3 apart and away from zero, so kinks are never straddled."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) + 1.0) * 1e-2 * rng.choice([-1.0, 1.0], n)
    return vals.reshape(shape)
