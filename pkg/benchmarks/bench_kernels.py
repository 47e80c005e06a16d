"""Compare the compiled and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each kernel runs on the same inputs under every available backend; the
script reports the best wall time per backend, the speedup over numpy, and
whether the outputs are bit-identical. A full training step and a
preprocessing pass are timed too.
"""

import argparse
import json
import time

import numpy as np

from retina_grader import kernels
from retina_grader.data import synth_fundus
from retina_grader.morph import PreprocSpec, preprocess
from retina_grader.nn import Network, default_network_spec
from retina_grader.optim import SGDConfig, train_step
from retina_grader.tensor import Rng


def cases(seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((16, 16, 128, 128))
    img = rng.random((512, 512))
    bits = (rng.random((512, 512)) < 0.5).astype(np.uint8)
    se = np.ones((3, 3), np.uint8)
    pooled, argmax = kernels.BACKENDS["python"].max_pool_forward(x, 2, 2, 2, 2)
    g = rng.standard_normal(pooled.shape)
    xc = rng.standard_normal((16, 3, 128, 128))
    cols = kernels.BACKENDS["python"].im2col(xc, 3, 3, 1, 1, 1)
    return {
        "im2col 16x3x128x128 k3": lambda k: k.im2col(xc, 3, 3, 1, 1, 1),
        "col2im 16x3x128x128 k3": lambda k: k.col2im(cols, 16, 3, 128, 128, 3, 3, 1, 1, 1),
        "max_pool fwd 16x16x128x128": lambda k: k.max_pool_forward(x, 2, 2, 2, 2),
        "max_pool bwd": lambda k: k.max_pool_backward(g, argmax, 128, 128),
        "avg_pool fwd": lambda k: k.avg_pool_forward(x, 2, 2, 2, 2),
        "avg_pool bwd": lambda k: k.avg_pool_backward(g, 128, 128, 2, 2, 2, 2),
        "binary erode 512^2 3x3": lambda k: k.binary_erode(bits, se, 1, 1, False),
        "binary dilate 512^2 3x3": lambda k: k.binary_dilate(bits, se, 1, 1, False),
        "gray erode 512^2 3x3": lambda k: k.gray_erode(img, se, 1, 1, 1.0),
        "gray dilate 512^2 3x3": lambda k: k.gray_dilate(img, se, 1, 1, 0.0),
    }


def best_time(fn, repeat):
    best = float("inf")
    result = None
    for _ in range(repeat):
        t = time.perf_counter()
        result = fn()
        best = min(best, time.perf_counter() - t)
    return best, result


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def pipeline_timings(repeat):
    spec = default_network_spec()
    batch = np.random.default_rng(1).random((16, 3, 128, 128))
    labels = np.arange(16) % 5
    image = synth_fundus(3, Rng(5))
    out = {}
    for name in kernels.available():
        kernels.use(name)
        net = Network.initialise(spec, 0)
        step, _ = best_time(lambda: train_step(net, batch, labels, SGDConfig(0.01), Rng(2)), repeat)
        prep, _ = best_time(lambda: preprocess(image, PreprocSpec()), repeat)
        out[name] = {"train_step_16": step, "preprocess_1": prep}
    kernels.use("auto")
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json")
    args = ap.parse_args()
    names = kernels.available()
    rows = []
    for label, fn in cases().items():
        times, outputs = {}, {}
        for name in names:
            times[name], outputs[name] = best_time(lambda: fn(kernels.BACKENDS[name]), args.repeat)
        identical = all(same(outputs[names[0]], outputs[n]) for n in names[1:])
        rows.append({"kernel": label, "seconds": times, "identical": identical})
    header = f"{'kernel':<30s}" + "".join(f"{n:>12s}" for n in names) + f"{'speedup':>10s}  identical"
    print(header)
    for r in rows:
        t = r["seconds"]
        speed = t["python"] / t["cython"] if "cython" in t else float("nan")
        print(f"{r['kernel']:<30s}" + "".join(f"{t[n] * 1e3:>10.2f}ms" for n in names)
              + f"{speed:>9.1f}x  {r['identical']}")
    pipe = pipeline_timings(max(1, args.repeat // 2))
    print()
    for name, t in pipe.items():
        print(f"{name:<8s} train step (16 x 3x128x128): {t['train_step_16']:.3f}s   "
              f"preprocess one image: {t['preprocess_1'] * 1e3:.1f}ms")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"kernels": rows, "pipeline": pipe}, fh, indent=2)


if __name__ == "__main__":
    main()
