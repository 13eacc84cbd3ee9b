"""Compare the compiled retrieval kernels against the pure-Python fallback.

    python benchmarks/bench_kernels.py --n 64 --candidates 500 --repeat 3
"""

import argparse
import time

import numpy as np

from windtunnel import _pykernels

try:
    from windtunnel import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=64, help="series length")
    ap.add_argument("--candidates", type=int, default=500)
    ap.add_argument("--radius", type=int, default=-1, help="Sakoe-Chiba radius, -1 for none")
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    a = rng.standard_normal(args.n)
    cands = rng.standard_normal((args.candidates, args.n))

    cases = {
        "dtw (one pair)": lambda k: lambda: k.dtw(a, cands[0], args.radius),
        f"dtw_many ({args.candidates})": lambda k: lambda: k.dtw_many(a, cands, args.radius),
        f"corr_many ({args.candidates})": lambda k: lambda: k.corr_many(a, cands),
    }
    print(f"{'kernel':<22}{'python s':>12}{'cython s':>12}{'speedup':>10}  max |diff|")
    for name, make in cases.items():
        tp, outp = best_of(make(_pykernels), args.repeat)
        if _ckernels is None:
            print(f"{name:<22}{tp:>12.5f}{'n/a':>12}{'n/a':>10}")
            continue
        tc, outc = best_of(make(_ckernels), args.repeat)
        diff = float(np.max(np.abs(np.asarray(outp, dtype=float) - np.asarray(outc, dtype=float))))
        print(f"{name:<22}{tp:>12.5f}{tc:>12.5f}{tp / tc:>9.1f}x  {diff:.2e}")


if __name__ == "__main__":
    main()
