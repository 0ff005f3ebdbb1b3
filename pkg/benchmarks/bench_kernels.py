"""Time the compiled kernels against the numpy fallback.

Run with ``python3 benchmarks/bench_kernels.py``. Both backends are imported
directly so a single process can compare them; results agree to rounding.
"""

import argparse
import time

import numpy as np

from degenmfg import _kernels_py
from degenmfg.fbsde import monomial_exponents

try:
    from degenmfg import _kernels as _compiled
except ImportError:
    _compiled = None


def best_of(fn, *args, repeat=5):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--N", type=int, default=10_000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _compiled is None:
        print("compiled extension not built; only the fallback is available")
    rng = np.random.default_rng(0)
    a = np.sort(rng.normal(size=args.N))
    b = np.sort(rng.normal(size=args.N))
    cases = []
    for n, degree in ((1, 2), (1, 3), (2, 2), (3, 2)):
        y = np.ascontiguousarray(rng.normal(size=(args.N, n)))
        exps = np.ascontiguousarray(monomial_exponents(n, degree), dtype=np.int_)
        cases.append((f"poly_design n={n} deg={degree}", "poly_design", (y, exps)))
    cases.insert(0, (f"w2_sq_sorted_1d N={args.N}", "w2_sq_sorted_1d", (a, b)))

    print(f"{'kernel':32s} {'python [ms]':>12s} {'cython [ms]':>12s} {'speedup':>8s} {'max diff':>10s}")
    for label, name, call_args in cases:
        t_py, out_py = best_of(getattr(_kernels_py, name), *call_args, repeat=args.repeat)
        if _compiled is None:
            print(f"{label:32s} {1e3 * t_py:12.3f} {'-':>12s} {'-':>8s} {'-':>10s}")
            continue
        t_cy, out_cy = best_of(getattr(_compiled, name), *call_args, repeat=args.repeat)
        diff = float(np.max(np.abs(np.asarray(out_py) - np.asarray(out_cy))))
        print(f"{label:32s} {1e3 * t_py:12.3f} {1e3 * t_cy:12.3f} {t_py / t_cy:8.2f} {diff:10.2e}")


if __name__ == "__main__":
    main()
