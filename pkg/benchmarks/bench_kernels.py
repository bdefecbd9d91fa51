"""Time the compiled and numpy im2col / col2im kernels on network-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from msdcnet._kernels import backends

# (name, input shape N,C,D,H,W, kernel, stride, pad)
CASES = [
    ("2d 5x5 s2 (stem)", (2, 3, 1, 64, 128), (1, 5, 5), (1, 2, 2), (0, 2, 2)),
    ("2d 3x3 dense", (2, 48, 1, 16, 32), (1, 3, 3), (1, 1, 1), (0, 1, 1)),
    ("3d 3x3x3 s1", (1, 16, 8, 16, 32), (3, 3, 3), (1, 1, 1), (1, 1, 1)),
    ("3d 3x3x3 s2", (1, 16, 8, 16, 32), (3, 3, 3), (2, 2, 2), (1, 1, 1)),
]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    found = backends()
    rng = np.random.default_rng(0)
    names = list(found)
    print(f"{'case':<20} {'kernel':<8} " + " ".join(f"{n + ' ms':>12}" for n in names) + "  speedup")
    for label, shape, k, s, p in CASES:
        x = rng.standard_normal(shape).astype(np.float32)
        cols = found["python"][0](x, k, s, p)
        for which, args_ in (("vol2col", (x, k, s, p)), ("col2vol", (cols, x.shape, k, s, p))):
            times = {}
            for name in names:
                fn = found[name][0 if which == "vol2col" else 1]
                times[name] = min(timeit.repeat(lambda: fn(*args_), number=1, repeat=args.repeat)) * 1e3
            ratio = times["python"] / times["cython"] if "cython" in times else float("nan")
            print(f"{label:<20} {which:<8} " + " ".join(f"{times[n]:>12.2f}" for n in names)
                  + f"  {ratio:6.2f}x")


if __name__ == "__main__":
    main()
