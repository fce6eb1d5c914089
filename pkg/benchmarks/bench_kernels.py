#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy fallback.

Shapes mimic the wide-vocabulary training regime where the kernels matter:
a sparse input-layer batch over a 5000-feature vocabulary, its weight
gradient scatter, and the fused Adam update over the input-layer weights.

    python benchmarks/bench_kernels.py [--repeat 50]
"""

import argparse
import time

import numpy as np

from mdat.kernels import numpy_backend

try:
    from mdat.kernels import numba_backend
except ImportError:
    numba_backend = None

VOCAB = 5000
HIDDEN = 1000
BATCH = 16
NNZ_PER_ROW = 100


def make_inputs(seed=0):
    rng = np.random.default_rng(seed)
    indptr = np.arange(0, (BATCH + 1) * NNZ_PER_ROW, NNZ_PER_ROW, dtype=np.int64)
    indices = np.concatenate([
        np.sort(rng.choice(VOCAB, size=NNZ_PER_ROW, replace=False))
        for _ in range(BATCH)
    ]).astype(np.int64)
    values = rng.integers(1, 5, size=BATCH * NNZ_PER_ROW).astype(np.float64)
    W = rng.standard_normal((HIDDEN, VOCAB)) * 0.03
    b = np.zeros(HIDDEN)
    dY = rng.standard_normal((BATCH, HIDDEN))
    n = HIDDEN * VOCAB
    params = rng.standard_normal(n) * 0.03
    grads = rng.standard_normal(n) * 0.001
    return indptr, indices, values, W, b, dY, params, grads


def bench(fn, repeat):
    fn()  # warm-up (and JIT compile on the numba side)
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args()

    indptr, indices, values, W, b, dY, params, grads = make_inputs()
    m = np.zeros_like(params)
    v = np.zeros_like(params)

    cases = {
        "affine_sparse (16x5000 @ 100nnz -> 1000)": lambda be: (
            lambda: be.affine_sparse(indptr, indices, values, W, b)),
        "grad_weights_sparse": lambda be: (
            lambda: be.grad_weights_sparse(dY, indptr, indices, values, VOCAB)),
        "adam_update (5M params)": lambda be: (
            lambda: be.adam_update(params.copy(), grads, m.copy(), v.copy(),
                                   1, 1e-4, 0.9, 0.999, 1e-8)),
    }

    print(f"{'kernel':45s} {'numpy':>12s} {'numba':>12s} {'speedup':>9s}")
    for name, make in cases.items():
        t_np = bench(make(numpy_backend), args.repeat)
        if numba_backend is None:
            print(f"{name:45s} {t_np*1e3:10.3f}ms {'n/a':>12s} {'n/a':>9s}")
            continue
        t_nb = bench(make(numba_backend), args.repeat)
        print(f"{name:45s} {t_np*1e3:10.3f}ms {t_nb*1e3:10.3f}ms "
              f"{t_np/t_nb:8.1f}x")


if __name__ == "__main__":
    main()
