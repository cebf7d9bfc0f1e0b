#!/usr/bin/env python3
"""Benchmark the two interchangeable conv-kernel backends.

The tensor core routes its same-padded 1-d convolution (forward, input
gradient, kernel gradient) through ``mvcrop.kernels``, which ships compiled
``numba.njit`` loops and a vectorized numpy fallback chosen at import time
(``MVCROP_NUMBA=0`` forces the fallback).  This script times both
implementations on engine-typical shapes, checks that they agree to
round-off, and prints one table per kernel with the speedup.

Run from the repository root:

    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --repeats 9 --inner 20
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from mvcrop.kernels import (
    HAS_NUMBA,
    active_backend,
    conv1d_forward_numba,
    conv1d_forward_numpy,
    conv1d_grad_input_numba,
    conv1d_grad_input_numpy,
    conv1d_grad_kernel_numba,
    conv1d_grad_kernel_numpy,
)

# (label, batch, steps, channels in, channels out, kernel width)
SHAPES = (
    ("small batch, few channels", 16, 12, 2, 8, 3),
    ("small batch, more channels", 16, 12, 8, 8, 3),
    ("train batch, first block", 256, 12, 11, 64, 5),
    ("train batch, deep block", 256, 12, 64, 64, 5),
    ("long series", 64, 128, 8, 32, 7),
)

AGREEMENT_TOL = 1e-9


def _best_of(fn, repeats: int, inner: int) -> float:
    """Best per-call seconds over ``repeats`` measurements of ``inner`` calls."""
    fn()  # warm up (and trigger compilation on the compiled path)
    best = float("inf")
    for _ in range(repeats):
        started = time.perf_counter()
        for _ in range(inner):
            fn()
        best = min(best, (time.perf_counter() - started) / inner)
    return best


def _cases(rng: np.random.Generator):
    for label, batch, steps, c_in, c_out, k in SHAPES:
        x = rng.normal(size=(batch, steps, c_in))
        w = rng.normal(size=(c_out, c_in, k))
        b = rng.normal(size=(c_out,))
        gy = rng.normal(size=(batch, steps, c_out))
        yield label, {
            "forward": (
                lambda x=x, w=w, b=b: conv1d_forward_numpy(x, w, b),
                lambda x=x, w=w, b=b: conv1d_forward_numba(x, w, b),
            ),
            "grad_input": (
                lambda gy=gy, w=w: conv1d_grad_input_numpy(gy, w),
                lambda gy=gy, w=w: conv1d_grad_input_numba(gy, w),
            ),
            "grad_kernel": (
                lambda x=x, gy=gy, k=k: conv1d_grad_kernel_numpy(x, gy, k),
                lambda x=x, gy=gy, k=k: conv1d_grad_kernel_numba(x, gy, k),
            ),
        }


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=7,
                        help="measurements per kernel (best is kept)")
    parser.add_argument("--inner", type=int, default=20,
                        help="calls per measurement")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    print(f"active package backend: {active_backend()}")
    if not HAS_NUMBA:
        print("numba is unavailable (not installed or MVCROP_NUMBA=0); "
              "timing the numpy fallback only.\n")

    rng = np.random.default_rng(args.seed)
    header = (f"{'kernel':<12} {'shape':<26} {'numpy ms':>10} "
              f"{'numba ms':>10} {'speedup':>8}")
    print(header)
    print("-" * len(header))
    for label, kernels in _cases(rng):
        for name, (numpy_fn, numba_fn) in kernels.items():
            if HAS_NUMBA:
                gap = float(np.max(np.abs(numba_fn() - numpy_fn())))
                if gap > AGREEMENT_TOL:
                    print(f"{name:<12} {label:<26} backends disagree "
                          f"(max abs diff {gap:.3e})")
                    return 1
            numpy_s = _best_of(numpy_fn, args.repeats, args.inner)
            if HAS_NUMBA:
                numba_s = _best_of(numba_fn, args.repeats, args.inner)
                print(f"{name:<12} {label:<26} {numpy_s * 1e3:>10.3f} "
                      f"{numba_s * 1e3:>10.3f} {numpy_s / numba_s:>7.1f}x")
            else:
                print(f"{name:<12} {label:<26} {numpy_s * 1e3:>10.3f} "
                      f"{'-':>10} {'-':>8}")
    if HAS_NUMBA:
        print(f"\nbackends agree to {AGREEMENT_TOL:g} on every case")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
