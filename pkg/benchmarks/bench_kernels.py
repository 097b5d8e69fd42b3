#!/usr/bin/env python3
"""Benchmark the compiled kernels against the numpy fallback.

Times the three hot kernels plus an end-to-end stimulation sweep on a
mid-size conv network. Run after building the extension:

    python benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from agnes.kernels import numpy_backend

try:
    from agnes.kernels import _ckernels as cython_backend
except ImportError:
    cython_backend = None


def timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_kernels(backend, repeats):
    rng = np.random.RandomState(0)
    x = rng.rand(32, 32, 8).astype(np.float32)
    kernel = rng.randn(16, 8, 3, 3).astype(np.float32)
    bias = np.zeros(16, np.float32)
    gout = rng.randn(30, 30, 16).astype(np.float32)
    results = {}
    results["conv2d_forward"] = timeit(
        lambda: backend.conv2d_forward(x, kernel, bias, 1, 0), repeats)
    results["conv2d_input_grad"] = timeit(
        lambda: backend.conv2d_input_grad(gout, kernel, 1, 0, 32, 32), repeats)
    results["maxpool_forward"] = timeit(
        lambda: backend.maxpool_forward(x, 2, 2), repeats)

    # CSR matvec on a conv-sized sparse matrix
    rows, taps = 4096, 27
    indptr = np.arange(0, rows * taps + 1, taps, dtype=np.int64)
    indices = rng.randint(0, 8192, size=rows * taps).astype(np.int64)
    data = rng.randn(rows * taps).astype(np.float32)
    sbias = np.zeros(rows, np.float32)
    vec = rng.rand(8192).astype(np.float32)
    results["sparse_matvec"] = timeit(
        lambda: backend.sparse_matvec(indptr, indices, data, sbias, vec), repeats)
    return results


def bench_sweep(backend_name, repeats):
    import os

    os.environ["AGNES_KERNELS"] = backend_name
    # reload the package so the backend choice is re-evaluated
    import importlib

    import agnes.kernels
    import agnes.nn
    import agnes.stimulation

    importlib.reload(agnes.kernels)
    importlib.reload(agnes.nn)
    importlib.reload(agnes.stimulation)
    from agnes.abstraction import profile_activations
    from agnes.nn import Conv2D, Flatten, FullyConnected, Network, ReLU
    from agnes.stimulation import (
        StimulationPlan,
        baseline_targets,
        build_value_grid,
        run_sweep,
    )

    rng = np.random.RandomState(1)
    net = Network((16, 16, 3), [
        Conv2D("c0", rng.randn(8, 3, 3, 3).astype(np.float32) * 0.3,
               np.zeros(8, np.float32), padding=1),
        ReLU("r0"),
        Conv2D("c1", rng.randn(8, 8, 3, 3).astype(np.float32) * 0.2,
               np.zeros(8, np.float32), padding=1),
        ReLU("r1"),
        Flatten("f"),
        FullyConnected("out", rng.randn(5, 2048).astype(np.float32) * 0.1,
                       np.zeros(5, np.float32)),
    ], 5)
    images = [rng.rand(16, 16, 3).astype(np.float32) for _ in range(8)]
    profiles = profile_activations(net, images, seed=0)
    plan = StimulationPlan(
        mode="baseline_feature",
        targets=baseline_targets(net),
        values_by_site={p.site_index: build_value_grid(p) for p in profiles},
        samples=[(i, 0) for i in range(4)],
    )
    return timeit(lambda: run_sweep(net, images, plan), repeats)


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    backends = [("numpy", numpy_backend)]
    if cython_backend is not None:
        backends.append(("cython", cython_backend))
    else:
        print("cython extension not built; showing numpy only")

    rows = {}
    for name, mod in backends:
        rows[name] = bench_kernels(mod, args.repeats)
    sweep = {name: bench_sweep(name, args.repeats) for name, _ in backends}
    for name in rows:
        rows[name]["stimulation_sweep"] = sweep[name]

    kernels = list(next(iter(rows.values())))
    width = max(len(k) for k in kernels)
    header = f"{'kernel':<{width}}" + "".join(f"  {n:>12}" for n in rows)
    if len(rows) == 2:
        header += f"  {'speedup':>9}"
    print(header)
    print("-" * len(header))
    for k in kernels:
        line = f"{k:<{width}}"
        vals = [rows[n][k] for n in rows]
        for v in vals:
            line += f"  {v * 1e3:>10.3f}ms"
        if len(vals) == 2 and vals[1] > 0:
            line += f"  {vals[0] / vals[1]:>8.2f}x"
        print(line)


if __name__ == "__main__":
    main()
