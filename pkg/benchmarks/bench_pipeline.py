"""Compare the compiled and pure-Python store-and-forward kernels.

    python benchmarks/bench_pipeline.py [--packets N] [--repeat R]
"""

import argparse
import timeit

import numpy as np

from nsfchain.netsim import kernel


def make_inputs(n: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    ready = np.cumsum(rng.integers(0, 20_000, n)).astype(np.int64)
    sizes = rng.integers(52, 9052, n).astype(np.int64)
    sched_t = np.array([0, int(ready[n // 2])], dtype=np.int64)
    sched_r = np.array([1_000_000_000, 10_000_000], dtype=np.int64)
    return ready, sizes, 50_000, 0, sched_t, sched_r


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--packets", type=int, nargs="+", default=[1, 30, 1000, 100_000])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    impls = {"python": kernel.python_hop_arrivals}
    if kernel.compiled_hop_arrivals is not None:
        impls["cython"] = kernel.compiled_hop_arrivals
    else:
        print("compiled kernel not built; timing the fallback only")
    print(f"{'packets':>8} " + " ".join(f"{k + ' us':>12}" for k in impls) + f" {'speedup':>8}")
    for n in args.packets:
        inputs = make_inputs(n)
        outs = {k: f(*inputs) for k, f in impls.items()}
        if len(outs) == 2:
            a, b = outs.values()
            assert np.array_equal(a[0], b[0]) and a[1] == b[1], "kernels disagree"
        number = max(1, 200_000 // n)
        times = {k: min(timeit.repeat(lambda f=f: f(*inputs), number=number,
                                      repeat=args.repeat)) / number * 1e6
                 for k, f in impls.items()}
        speed = times["python"] / times["cython"] if "cython" in times else float("nan")
        print(f"{n:>8} " + " ".join(f"{t:>12.2f}" for t in times.values()) + f" {speed:>8.1f}x")


if __name__ == "__main__":
    main()
