"""Benchmark the accelerated kernels against the pure-numpy reference.

Usage: python3 benchmarks/bench_kernels.py [--rows N] [--cols N] [--repeats K]

Runs every quantization kernel under both backends on the same inputs, prints
per-call timings and the speedup, and verifies the outputs stay bit-identical.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from upq.kernels import accel, reference


def _inputs(rows: int, cols: int, seed: int):
    rng = np.random.default_rng(seed)
    W = rng.normal(0, 0.05, size=(rows, cols)).astype(np.float32)
    delta = (np.abs(W).max(axis=1) + 1e-3).astype(np.float32)
    g = rng.normal(0, 1, size=(rows, cols)).astype(np.float32)
    S = np.exp(rng.normal(0, 0.05, size=(rows, cols))).astype(np.float32)
    s = np.exp(rng.normal(0, 0.05, size=rows)).astype(np.float32)
    gamma = np.full(rows, 0.97, dtype=np.float32)
    beta = np.full(rows, 0.96, dtype=np.float32)
    d4 = (np.abs(W).max(axis=1) / 7.5 + 1e-6).astype(np.float32)
    eps = 0.01
    return {
        "seq_forward": (W, delta, eps),
        "seq_backward": (W, delta, eps, g),
        "flexround_forward": (W, delta, S, s),
        "flexround_backward": (W, delta, S, s, g),
        "int4_forward": (W, d4),
        "int4_backward": (W, d4, g),
    }


def bench(fn, args, repeats: int) -> tuple[float, object]:
    out = fn(*args)  # warm-up (and numba compile)
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best, out


def _same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=1024)
    ap.add_argument("--cols", type=int, default=1024)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cases = _inputs(args.rows, args.cols, args.seed)
    print(f"matrix {args.rows}x{args.cols}, best of {args.repeats} repeats\n")
    print(f"{'kernel':<22}{'numpy (ms)':>12}{'numba (ms)':>12}{'speedup':>9}  bit-equal")
    ok = True
    for name, inp in cases.items():
        t_ref, out_ref = bench(getattr(reference, name), inp, args.repeats)
        t_acc, out_acc = bench(getattr(accel, name), inp, args.repeats)
        equal = _same(out_ref, out_acc)
        ok &= equal
        print(f"{name:<22}{t_ref * 1e3:>12.3f}{t_acc * 1e3:>12.3f}"
              f"{t_ref / t_acc:>9.2f}  {equal}")
    if not ok:
        print("\nFAIL: backends disagree")
        return 1
    print("\nall kernels bit-identical across backends")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
