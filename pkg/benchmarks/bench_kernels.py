"""Benchmark the hot graph kernels: numpy fallback vs compiled extension.

The training loop builds many small fully connected graphs per iteration
(pairwise differences, a two-block edge encoder over every ordered pair,
pairwise squared distances for triplet mining), so per-call overhead
dominates at episode scale. Run with:

    python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from fewgraph._kernels import _ops_np

try:
    from fewgraph._kernels import _ops_cy
except ImportError:
    _ops_cy = None

SIZES = [(10, 16), (25, 16), (50, 16), (100, 16), (50, 64)]


def time_call(fn, *args, min_time: float = 0.2) -> float:
    fn(*args)  # warm up
    reps = 1
    while True:
        t0 = time.perf_counter()
        for _ in range(reps):
            fn(*args)
        elapsed = time.perf_counter() - t0
        if elapsed >= min_time:
            return elapsed / reps
        reps = max(reps * 2, int(reps * min_time / max(elapsed, 1e-9)))


def edge_params(rng, dim, hidden=32):
    return (
        rng.normal(size=(dim, hidden)), rng.normal(size=hidden),
        rng.normal(size=hidden) + 1.2, rng.normal(size=hidden),
        rng.normal(size=(hidden, hidden)), rng.normal(size=hidden),
        rng.normal(size=hidden) + 1.2, rng.normal(size=hidden),
        rng.normal(size=hidden), rng.normal(size=1),
    )


def main():
    rng = np.random.default_rng(0)
    backends = [("numpy", _ops_np)]
    if _ops_cy is not None:
        backends.append(("compiled", _ops_cy))
    else:
        print("compiled extension not built; benchmarking the numpy fallback only\n")

    header = f"{'kernel':<18}{'n':>5}{'d':>5}" + "".join(f"{name:>14}" for name, _ in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    print("-" * len(header))

    for n, d in SIZES:
        z = np.ascontiguousarray(rng.normal(size=(n, d)))
        diffs = np.ascontiguousarray(rng.normal(size=(n * n, d)))
        params = edge_params(rng, d)
        rows = [
            ("pairwise_sqdist", lambda ops, z=z: ops.pairwise_sqdist(z)),
            ("pairwise_diffs", lambda ops, z=z: ops.pairwise_diffs(z)),
            ("edge_mlp_forward", lambda ops, diffs=diffs, params=params: ops.edge_mlp_forward(diffs, *params)),
        ]
        for kernel, call in rows:
            times = [time_call(lambda ops=ops: call(ops)) for _, ops in backends]
            line = f"{kernel:<18}{n:>5}{d:>5}"
            for t in times:
                line += f"{1e6 * t:>12.1f}us"
            if len(times) == 2:
                line += f"{times[0] / times[1]:>9.2f}x"
            print(line)
        print()


if __name__ == "__main__":
    main()
