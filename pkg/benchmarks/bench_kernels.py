"""Time the compiled kernels against the NumPy fallback and check they agree.

    python benchmarks/bench_kernels.py [--size 256] [--repeat 3]
"""
import argparse
import timeit

import numpy as np

from lucmodel import _kernels_py

try:
    from lucmodel import _kernels as _kernels_c
except ImportError:
    _kernels_c = None


def _cases(size, rng):
    index = rng.integers(-1, 6, size=(size, size)).astype(np.int32)
    eligible = rng.random((size, size)) < 0.8
    field = rng.random((size, size))
    a = rng.integers(0, 8, size=(size, size)).astype(np.int64)
    b = a.copy()
    flip = rng.random(a.shape) < 0.3
    b[flip] = rng.integers(0, 8, size=int(flip.sum()))
    yy, xx = np.mgrid[-3:4, -3:4]
    weights = np.exp(-(yy ** 2 + xx ** 2) / (2 * 1.5 ** 2))
    seed = size // 2
    eligible[seed, seed] = True
    return {
        "window_counts": lambda k: k.window_counts(index, 6, 3),
        "grow_region": lambda k: k.grow_region(eligible, field, seed, seed, 400, 1.5),
        "fuzzy_membership": lambda k: k.fuzzy_membership(a, b, weights),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=256)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    cases = _cases(args.size, rng)
    if _kernels_c is None:
        print("compiled extension not built; timing the fallback only")
    print(f"{'kernel':<18} {'python (s)':>11} {'cython (s)':>11} {'speedup':>8}  agree")
    for name, call in cases.items():
        t_py = min(timeit.repeat(lambda: call(_kernels_py), number=1, repeat=args.repeat))
        if _kernels_c is None:
            print(f"{name:<18} {t_py:11.4f} {'-':>11} {'-':>8}  -")
            continue
        t_c = min(timeit.repeat(lambda: call(_kernels_c), number=1, repeat=args.repeat))
        agree = np.array_equal(call(_kernels_py), call(_kernels_c))
        print(f"{name:<18} {t_py:11.4f} {t_c:11.4f} {t_py / t_c:8.1f}  {agree}")


if __name__ == "__main__":
    main()
