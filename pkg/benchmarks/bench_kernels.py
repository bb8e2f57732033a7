"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Both backends are imported directly, so this works whichever one the
package selected at import time. Outputs are cross-checked before timing.
"""
import argparse
import timeit

import numpy as np

from ecfusion.numerics import _pykernels

try:
    from ecfusion.numerics import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    feat = rng.normal(size=(64, 64, 32))
    pos = rng.uniform(-2, 66, (64 * 64, 2))
    g = rng.normal(size=(64 * 64, 32))
    ha = rng.random((64, 64, 3))
    hb = rng.random((64, 64, 3))
    gcv = rng.normal(size=(64, 64, 16))
    cost = rng.random((30, 30))
    return {
        "sample_forward 64x64x32": lambda k: k.sample_forward(feat, pos),
        "sample_backward 64x64x32": lambda k: k.sample_backward(feat, pos, g),
        "cost_volume_forward q=4": lambda k: k.cost_volume_forward(ha, hb, 4),
        "cost_volume_backward q=4": lambda k: k.cost_volume_backward(ha, hb, 4, gcv),
        "local_max 64x64x3": lambda k: k.local_max(ha, 3),
        "linear_assignment 30x30": lambda k: k.linear_assignment(cost),
    }


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=0, atol=1e-12)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    backends = [("numpy", _pykernels)] + ([("cython", _ckernels)] if _ckernels else [])
    print(f"{'kernel':<28}" + "".join(f"{n:>12}" for n, _ in backends) + ("   speedup" if _ckernels else ""))
    for name, fn in cases(rng).items():
        if _ckernels and not same(fn(_pykernels), fn(_ckernels)):
            raise SystemExit(f"{name}: backends disagree")
        times = [min(timeit.repeat(lambda: fn(k), number=1, repeat=args.repeat)) for _, k in backends]
        row = f"{name:<28}" + "".join(f"{t * 1e3:>10.3f}ms" for t in times)
        if _ckernels:
            row += f"{times[0] / times[1]:>9.1f}x"
        print(row)
    if _ckernels is None:
        print("compiled kernels not built; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
