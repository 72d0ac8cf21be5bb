"""Compare the compiled and numpy batched matrix-exponential kernels.

    python benchmarks/bench_backends.py [--repeat 5]

Prints the best-of-N wall time per workload for each backend, the speedup and
the largest entrywise disagreement.  Workloads mirror the hot loops: one
stack per simulated event (Van Loan blocks for 1-D and 2-D models) and a
quadrature panel of exp(G tau) at 21 nodes.
"""

import argparse
import time

import numpy as np

from ttshs import _kernels_py

try:
    from ttshs import _kernels
except ImportError:
    _kernels = None


def _workloads(rng):
    out = []
    for n, k, label in ((6, 1000, "MC step, scalar model (1000 x 6x6)"),
                        (14, 1000, "MC step, 2-D model (1000 x 14x14)"),
                        (7, 21, "quadrature panel (21 x 7x7)"),
                        (3, 20000, "many small (20000 x 3x3)")):
        M = rng.normal(size=(n, n)) / n
        taus = rng.exponential(2.0, size=k)
        out.append((label, M, taus))
    return out


def _best(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(args.seed)
    if _kernels is None:
        print("compiled kernel not built; only the numpy backend is available")
    print(f"{'workload':<38} {'numpy [ms]':>11} {'compiled [ms]':>14} {'speedup':>8} {'max diff':>10}")
    for label, M, taus in _workloads(rng):
        t_py = _best(lambda: _kernels_py.expm_batch(M, taus), args.repeat)
        if _kernels is None:
            print(f"{label:<38} {1e3 * t_py:11.2f} {'-':>14} {'-':>8} {'-':>10}")
            continue
        t_c = _best(lambda: _kernels.expm_batch(M, taus), args.repeat)
        a = _kernels_py.expm_batch(M, taus)
        b = _kernels.expm_batch(M, taus)
        diff = float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(a))))
        print(f"{label:<38} {1e3 * t_py:11.2f} {1e3 * t_c:14.2f} {t_py / t_c:8.1f} {diff:10.1e}")


if __name__ == "__main__":
    main()
