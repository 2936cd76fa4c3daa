#!/usr/bin/env python3
"""Wall-clock comparison of the numpy and numba quantization kernels.

Runs the block_norms -> assign_codes -> reconstruct round trip on random
square matrices and reports the median time per backend plus the speedup.
Before timing anything it checks the two backends agree bit for bit; a
mismatch aborts the run, because a fast wrong kernel is not interesting.

Usage:
    python3 benchmarks/bench_kernels.py [--orders 128,256,512,1024]
                                        [--block 64] [--bits 4] [--reps 7]
"""

from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from qshampoo import backend
from qshampoo.quant import build_codebook


def _round_trip(k, X, cb, block):
    norms = k.block_norms(X, block)
    codes = k.assign_codes(X, norms, cb.midpoints, block, cb.zero_code)
    return codes, norms, k.reconstruct(codes, norms, cb.values, block)


def check_consistency(X, cb, block) -> float:
    """Max |numpy - numba| over the round trip; codes must match exactly."""
    prev = backend.use_backend("numpy")
    try:
        codes_np, norms_np, out_np = _round_trip(backend.kernels(), X, cb, block)
        backend.use_backend("numba")
        codes_nb, norms_nb, out_nb = _round_trip(backend.kernels(), X, cb, block)
    finally:
        backend.use_backend(prev)
    if not np.array_equal(codes_np, codes_nb):
        raise AssertionError("backends assign different codes")
    if not np.array_equal(norms_np, norms_nb):
        raise AssertionError("backends compute different block norms")
    return float(np.max(np.abs(out_np - out_nb)))


def time_backend(name, X, cb, block, reps) -> float:
    prev = backend.use_backend(name)
    try:
        backend.warmup()
        k = backend.kernels()
        samples = []
        for _ in range(reps):
            t0 = time.perf_counter()
            _round_trip(k, X, cb, block)
            samples.append(time.perf_counter() - t0)
    finally:
        backend.use_backend(prev)
    return statistics.median(samples)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--orders", default="128,256,512,1024")
    ap.add_argument("--block", type=int, default=64)
    ap.add_argument("--bits", type=int, default=4)
    ap.add_argument("--reps", type=int, default=7)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    if "numba" not in backend.available_backends():
        print("numba backend unavailable; nothing to compare")
        return 1

    cb = build_codebook(args.bits, "linear2")
    rng = np.random.default_rng(args.seed)
    orders = [int(tok) for tok in args.orders.split(",")]

    print(f"block={args.block} bits={args.bits} reps={args.reps} "
          f"(median wall time per round trip)")
    print(f"{'order':>6} {'numpy':>12} {'numba':>12} {'speedup':>8} {'maxdiff':>9}")
    for order in orders:
        X = rng.standard_normal((order, order))
        maxdiff = check_consistency(X, cb, args.block)
        t_np = time_backend("numpy", X, cb, args.block, args.reps)
        t_nb = time_backend("numba", X, cb, args.block, args.reps)
        print(f"{order:>6} {t_np * 1e3:>10.3f}ms {t_nb * 1e3:>10.3f}ms "
              f"{t_np / t_nb:>7.1f}x {maxdiff:>9.1e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
