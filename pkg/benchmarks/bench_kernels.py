"""Compiled vs numpy conv3d kernels at the shapes the CT encoder sees.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints one line per kernel and shape with the best-of-N wall time of each
backend and the speedup. Exits nonzero when the extension is not built.
"""
import argparse
import sys
import time

import numpy as np

from ditl.tensorcore import _fallback

try:
    from ditl.tensorcore import _kernels
except ImportError:
    _kernels = None

# (batch, in channels, out channels, extents): first and second encoder blocks
# on the cropped reference volumes, plus an early-fusion input with 19 channels
SHAPES = [
    (8, 1, 4, (28, 28, 14)),
    (8, 4, 8, (14, 14, 7)),
    (8, 8, 16, (7, 7, 3)),
    (8, 19, 4, (28, 28, 14)),
]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if _kernels is None:
        print("compiled extension not built; run `python setup.py build_ext --inplace`", file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<16}{'shape':<28}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}")
    for n, cin, cout, ext in SHAPES:
        x = rng.standard_normal((n, cin) + ext)
        w = rng.standard_normal((cout, cin, 3, 3, 3))
        gy = rng.standard_normal((n, cout) + ext)
        cases = {
            "forward": lambda m: m.conv3d_forward(x, w, 1, 1),
            "backward_input": lambda m: m.conv3d_backward_input(gy, w, x.shape, 1, 1),
            "backward_weight": lambda m: m.conv3d_backward_weight(x, gy, 3, 1, 1),
        }
        for name, fn in cases.items():
            a = fn(_fallback)
            b = fn(_kernels)
            err = np.max(np.abs(a - b))
            if err > 1e-9:
                print(f"backends disagree on {name}: max |diff| {err:.2e}", file=sys.stderr)
                return 2
            tn = best_of(lambda: fn(_fallback), args.repeat)
            tk = best_of(lambda: fn(_kernels), args.repeat)
            shape = f"{n}x{cin}->{cout} {ext[0]}x{ext[1]}x{ext[2]}"
            print(f"{name:<16}{shape:<28}{1e3 * tn:>10.2f}{1e3 * tk:>11.2f}{tn / tk:>8.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
