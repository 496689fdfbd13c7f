"""Compiled kernels against the numpy fallback.

Run with ``python3 benchmarks/bench_kernels.py``. Each kernel is timed on the
same inputs for both backends, and the outputs are compared before timing.
"""

import argparse
import timeit

import numpy as np

from safempc import _kernels_py

try:
    from safempc import _kernels
except ImportError:
    _kernels = None


def cases(rng):
    n = 400
    Ap = rng.normal(size=n)
    slack = rng.uniform(0, 1, size=n)
    work = rng.uniform(size=n) < 0.2
    yield "ratio_test", (Ap, slack, work, 1e-12)

    m, q = 1301, 16
    V = rng.normal(size=m)
    cost = rng.uniform(size=m)
    idx = rng.integers(0, m - 1, size=(m, q)).astype(np.int64)
    frac = rng.uniform(size=(m, q))
    w = np.full(q, 1.0 / q)
    yield "bellman_sweep", (V, cost, idx, frac, w, 0.9)

    s0 = rng.uniform(-0.01, 0.01, size=2000)
    noise = rng.uniform(-0.1, 0.1, size=(2000, 20))
    yield "chain_stay", (s0, noise, 0.9, -0.01, 0.01)

    yield "worst_rollout_attracted", (-8.5, 1.1, 0.1, 11.0, 0.9, -10.0, 4.5, 0.1, 0.01, 2000)


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.allclose(np.asarray(a, dtype=float), np.asarray(b, dtype=float), rtol=1e-12, atol=1e-12)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--number", type=int, default=200)
    args = p.parse_args(argv)
    if _kernels is None:
        print("compiled core not built; only the fallback is available")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<26}{'python us':>12}{'cython us':>12}{'speedup':>10}")
    for name, inp in cases(rng):
        fp, fc = getattr(_kernels_py, name), getattr(_kernels, name)
        if not same(fp(*inp), fc(*inp)):
            raise SystemExit(f"{name}: backends disagree")
        tp = min(timeit.repeat(lambda: fp(*inp), repeat=args.repeat, number=args.number)) / args.number
        tc = min(timeit.repeat(lambda: fc(*inp), repeat=args.repeat, number=args.number)) / args.number
        print(f"{name:<26}{tp * 1e6:>12.1f}{tc * 1e6:>12.1f}{tp / tc:>10.1f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
