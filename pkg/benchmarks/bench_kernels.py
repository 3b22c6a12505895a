"""Time the numba-compiled kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 5] [--markets 10000]

Both paths are imported directly, so the DMSB_NUMBA flag does not matter
here. Compilation is triggered once before timing.
"""

import argparse
import timeit

import numpy as np

from dmsb import kernels


def make_inputs(markets, seed=0):
    rng = np.random.default_rng(seed)
    counts = rng.integers(2, 10, size=markets)
    bids = np.zeros((markets, 9))
    for i, c in enumerate(counts):
        bids[i, :c] = rng.lognormal(3.0, 1.0, size=c)
    rho = rng.uniform(1.0, 10.0, size=markets)
    factors = np.linspace(0.0, 3.0, 100)
    vmax = rng.lognormal(3.0, 0.5, size=20)
    v0 = rng.lognormal(2.5, 0.5, size=20)
    grid = np.linspace(0.0, vmax.max(), 1000)
    return dict(bids=bids, counts=counts, rho=rho, factors=factors, vmax=vmax, v0=v0, grid=grid)


def cases(x):
    return {
        "msb_batch": (
            lambda: kernels.msb_batch_loop(x["bids"], x["counts"], x["rho"]),
            lambda: kernels.msb_batch_numpy(x["bids"], x["counts"], x["rho"]),
        ),
        "truthfulness_scan": (
            lambda: kernels.truthfulness_scan_loop(x["bids"], x["counts"], x["rho"],
                                                   x["factors"], 1e-12),
            lambda: kernels.truthfulness_scan_numpy(x["bids"], x["counts"], x["rho"],
                                                    x["factors"], 1e-12),
        ),
        "contracted_bid_index": (
            lambda: kernels.contracted_bid_index_loop(x["vmax"], x["v0"], x["grid"]),
            lambda: kernels.contracted_bid_index_numpy(x["vmax"], x["v0"], x["grid"]),
        ),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--markets", type=int, default=10_000)
    args = ap.parse_args()
    if not kernels.NUMBA_AVAILABLE:
        print("numba is not installed; the loop kernels below run as plain Python")
    x = make_inputs(args.markets)
    print(f"{'kernel':<22}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for name, (fast, slow) in cases(x).items():
        fast()  # compile
        t_fast = min(timeit.repeat(fast, number=1, repeat=args.repeat)) * 1e3
        t_slow = min(timeit.repeat(slow, number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<22}{t_fast:>12.3f}{t_slow:>12.3f}{t_slow / t_fast:>9.1f}x")


if __name__ == "__main__":
    main()
