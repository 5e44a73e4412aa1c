"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints one line per (kernel, size) with the best-of-N time of each backend,
their ratio and the largest absolute disagreement between the two.
"""
from __future__ import annotations

import argparse
import sys
import timeit

import numpy as np

from pedcc_ssl import _pykernels

try:
    from pedcc_ssl import _ckernels
except ImportError:
    _ckernels = None

CASES = [
    ("repulsion_forces", (10, 128)),
    ("repulsion_forces", (40, 16)),
    ("repulsion_forces", (200, 8)),
    ("pairwise_sqdist", (64, 8)),
    ("pairwise_sqdist", (400, 8)),
    ("pairwise_sqdist", (400, 128)),
]


def inputs(kernel, shape, rng):
    x = rng.standard_normal(shape)
    if kernel == "repulsion_forces":
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        return (x, 2.0)
    return (x, rng.standard_normal(shape))


def best_time(fn, args, repeat):
    number = max(1, int(0.05 / max(timeit.timeit(lambda: fn(*args), number=1), 1e-7)))
    return min(timeit.repeat(lambda: fn(*args), number=number, repeat=repeat)) / number


def disagreement(a, b):
    if isinstance(a, tuple):
        return max(float(np.max(np.abs(np.asarray(x) - np.asarray(y)))) for x, y in zip(a, b))
    return float(np.max(np.abs(a - b)))


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=5, help="timing repeats; the best is reported")
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled kernels not built; run `pip install -e . --no-build-isolation` first", file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':18s} {'shape':>10s} {'python us':>11s} {'cython us':>11s} {'speedup':>8s} {'max diff':>9s}")
    for kernel, shape in CASES:
        args_ = inputs(kernel, shape, rng)
        py, cy = getattr(_pykernels, kernel), getattr(_ckernels, kernel)
        t_py, t_cy = best_time(py, args_, args.repeat), best_time(cy, args_, args.repeat)
        diff = disagreement(py(*args_), cy(*args_))
        print(f"{kernel:18s} {'x'.join(map(str, shape)):>10s} {t_py * 1e6:11.1f} {t_cy * 1e6:11.1f} "
              f"{t_py / t_cy:8.2f} {diff:9.1e}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
