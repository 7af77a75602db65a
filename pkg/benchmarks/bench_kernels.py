"""Time the numba kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20]

Shapes follow one desk-scale step: 64 frames, 100 triplet classes,
six-component prompt pools over 32-dim features.
"""
import argparse
import timeit

import numpy as np

from tripletlab.kernels import _numpy

try:
    from tripletlab.kernels import _numba
except ImportError:  # numba missing: report the fallback alone
    _numba = None


def cases(rng):
    z = rng.normal(scale=3.0, size=(64, 100))
    y = (rng.random((64, 100)) < 0.05).astype(np.float64)
    hp = (rng.random((64, 100)) < 0.9).astype(np.float64)
    hm = (rng.random((64, 100)) < 0.9).astype(np.float64)
    x, mu = rng.normal(size=(64, 32)), rng.normal(size=(6, 32))
    scores = rng.random((256, 100))
    labels = (rng.random((256, 100)) < 0.05).astype(np.float64)
    member = rng.integers(0, 15, size=100)
    return {
        "masked_bce": lambda m: m.masked_bce(z, y, hp, hm),
        "sigmoid": lambda m: m.sigmoid(z),
        "sq_dist": lambda m: m.sq_dist(x, mu),
        "average_precision": lambda m: m.average_precision(scores, labels),
        "max_project": lambda m: m.max_project(scores, member, 15),
    }


def best_of(fn, repeat):
    number = 50
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    print(f"{'kernel':<20}{'numpy us':>12}{'numba us':>12}{'speedup':>10}")
    for name, call in cases(np.random.default_rng(args.seed)).items():
        t_np = best_of(lambda: call(_numpy), args.repeat)
        if _numba is None:
            print(f"{name:<20}{1e6 * t_np:>12.1f}{'n/a':>12}{'':>10}")
            continue
        call(_numba)  # compile outside the timed region
        t_nb = best_of(lambda: call(_numba), args.repeat)
        print(f"{name:<20}{1e6 * t_np:>12.1f}{1e6 * t_nb:>12.1f}{t_np / t_nb:>9.2f}x")


if __name__ == "__main__":
    main()
