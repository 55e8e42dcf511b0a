"""Time the compiled and numpy kernel backends on window-attention workloads.

    python3 benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import statistics
import time

import numpy as np

from himosa import _kernels

# (label, windows, tokens per window, channels, experts, expert width, k)
WORKLOADS = [
    ("tiny layer", 16, 16, 16, 2, 16, 8),
    ("full ws=8 rho=1", 64, 64, 60, 8, 48, 64),
    ("full ws=32 rho=4", 4, 1024, 60, 8, 48, 256),
]


def _time(fn, repeats):
    fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(samples)


def run(repeats: int):
    rng = np.random.default_rng(0)
    backends = sorted(_kernels.BACKENDS)
    print("workload\tbackend\ttopk_ms\tforward_ms\tbackward_ms")
    for label, B, n, d, m, e, k in WORKLOADS:
        tokens = rng.standard_normal((B, n, d))
        scores = rng.random((B, n, m))
        gates = rng.random((B, m, k))
        wq, wk, wv = (rng.standard_normal((m, d, e)) * 0.1 for _ in range(3))
        wo = rng.standard_normal((m, e, d)) * 0.1
        dout = rng.standard_normal((B, n, d))
        idx = _kernels.topk_indices(scores, k, backend="python")
        for name in backends:
            topk = _time(lambda: _kernels.topk_indices(scores, k, backend=name), repeats)
            fwd = _time(lambda: _kernels.sparse_attention_forward(tokens, idx, gates, wq, wk, wv, wo,
                                                                  backend=name), repeats)
            _, cache = _kernels.sparse_attention_forward(tokens, idx, gates, wq, wk, wv, wo, backend=name)
            bwd = _time(lambda: _kernels.sparse_attention_backward(dout, tokens, idx, gates, wq, wk, wv, wo,
                                                                   cache, backend=name), repeats)
            print(f"{label}\t{name}\t{topk:.3f}\t{fwd:.3f}\t{bwd:.3f}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=5)
    run(ap.parse_args().repeats)
