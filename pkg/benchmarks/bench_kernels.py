"""Compiled vs numpy-fallback kernels: Jacobi eigendecomposition and 1-D GMM EM.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import time

import numpy as np

from mlad import backend
from mlad.numerics import sym_eig
from mlad.sad import fit_entropy_gmm


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    cases = []
    for n in (16, 64, 128):
        a = rng.normal(size=(n, n))
        sym = a @ a.T / n
        cases.append((f"sym_eig {n}x{n}", lambda name, s=sym: sym_eig(s, backend_name=name)))
    h = np.concatenate([0.2 + 0.05 * rng.normal(size=5000), 1.1 + 0.05 * rng.normal(size=5000)])
    cases.append(("gmm em n=10000", lambda name: fit_entropy_gmm(h, name)))

    names = backend.available()
    print(f"{'case':<20}" + "".join(f"{n:>12}" for n in names) + ("     speedup" if len(names) > 1 else ""))
    for label, fn in cases:
        secs = [best_of(lambda: fn(n), args.repeat) for n in names]
        row = f"{label:<20}" + "".join(f"{s * 1e3:>10.2f}ms" for s in secs)
        if len(secs) > 1:
            row += f"{secs[1] / secs[0]:>11.1f}x"
        print(row)
    if "cython" not in names:
        print("compiled kernels not built; only the fallback was timed")


if __name__ == "__main__":
    main()
