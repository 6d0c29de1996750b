"""Compiled vs numpy kernel timings.

    python3 benchmarks/bench_kernels.py [--n 1000000] [--repeat 5] [--end-to-end]

Kernel timings exclude compilation (one warm-up call first). ``--end-to-end``
also times the desk-scale ``generate + train + eval`` commands in fresh
interpreters with XVDISTILL_NUMBA=1 and =0.
"""

import argparse
import os
import subprocess
import sys
import tempfile
import time
import timeit

import numpy as np

from xvdistill import kernels


def best_of(fn, repeat):
    fn()  # warm-up / JIT
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_table(n, repeat):
    rng = np.random.default_rng(0)
    x = rng.uniform(1e-3, 50.0, n)
    rows = rng.integers(0, 50, n)
    cols = rng.integers(0, 100, n)
    vals = rng.normal(size=n)
    cases = {
        "lgamma": (lambda: kernels.lgamma_numba(x), lambda: kernels.lgamma_numpy(x)),
        "digamma": (lambda: kernels.digamma_numba(x), lambda: kernels.digamma_numpy(x)),
        "maxpool": (lambda: kernels.maxpool_numba(rows, cols, vals, (50, 100), -np.inf),
                    lambda: kernels.maxpool_numpy(rows, cols, vals, (50, 100), -np.inf)),
    }
    print(f"{'kernel':<10}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}   (n={n})")
    for name, (fast, slow) in cases.items():
        a, b = best_of(fast, repeat), best_of(slow, repeat)
        print(f"{name:<10}{a * 1e3:>12.2f}{b * 1e3:>12.2f}{b / a:>10.1f}x")


def end_to_end():
    print("\nend-to-end desk pipeline (generate + train + eval)")
    for flag in ("1", "0"):
        env = dict(os.environ, XVDISTILL_NUMBA=flag)
        with tempfile.TemporaryDirectory() as out:
            t0 = time.perf_counter()
            for cmd in ("generate", "train", "eval"):
                subprocess.run([sys.executable, "-m", "xvdistill", "--out-dir", out,
                                "--log-level", "WARNING", cmd], env=env, check=True)
            print(f"  XVDISTILL_NUMBA={flag}: {time.perf_counter() - t0:.2f} s")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=1_000_000)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--end-to-end", action="store_true")
    args = ap.parse_args()
    kernel_table(args.n, args.repeat)
    if args.end_to_end:
        end_to_end()


if __name__ == "__main__":
    main()
