"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Both backends are imported directly, so no environment switch is needed.
Also times one masked forward/backward of the default training network.
"""
import argparse
import time

import numpy as np

from decore import _pykernels
from decore.graph import attach_gates, build_vgg_tiny
from decore.model import backward, forward, init_params
from decore.runtime import softmax_xent

try:
    from decore import _ckernels
except ImportError:
    _ckernels = None


def best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    r = np.random.default_rng(0)
    x = r.standard_normal((64, 16, 16, 16)).astype(np.float32)
    cols = _pykernels.im2col(x, 3, 1, 1)
    pooled, idx = _pykernels.maxpool2_forward(x)
    cases = {
        "im2col 64x16x16x16 k3": lambda m: m.im2col(x, 3, 1, 1),
        "col2im 64x16x16x16 k3": lambda m: m.col2im(cols, x.shape, 3, 1, 1),
        "maxpool2 forward": lambda m: m.maxpool2_forward(x),
        "maxpool2 backward": lambda m: m.maxpool2_backward(pooled, idx, x.shape),
    }
    print(f"{'kernel':28s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn in cases.items():
        tp = best_of(lambda: fn(_pykernels), args.repeat)
        if _ckernels is None:
            print(f"{name:28s} {tp * 1e3:10.3f} {'n/a':>10s}")
            continue
        tc = best_of(lambda: fn(_ckernels), args.repeat)
        print(f"{name:28s} {tp * 1e3:10.3f} {tc * 1e3:10.3f} {tp / tc:7.1f}x")

    from decore import kernels
    g, _ = attach_gates(build_vgg_tiny([16, 32], 64, 10, (1, 16, 16)))
    params = init_params(g, r)
    xb = r.random((64, 1, 16, 16)).astype(np.float32)
    yb = r.integers(0, 10, 64)

    def step():
        logits, cache = forward(g, params, xb)
        backward(g, params, cache, softmax_xent(logits, yb)[1])

    print(f"\nforward+backward, batch 64, backend {kernels.BACKEND}: {best_of(step, args.repeat) * 1e3:.2f} ms")


if __name__ == "__main__":
    main()
