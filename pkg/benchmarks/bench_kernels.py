"""Numba vs numpy timings for the hot kernels.

    python benchmarks/bench_kernels.py [--repeat 5] [--seq-len 100 1000]

Both twins are imported directly, so the env flag does not matter here.
Compile time is excluded by a warm-up call.
"""

import argparse
import time

import numpy as np

from lithium_ssm import kernels


def best_of(fn, args, repeat):
    fn(*args)  # warm-up (numba compiles or loads its cache here)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(seq_lens, rng):
    for nl in seq_lens:
        shape = (4, nl, 16, 16)  # batch 4, D = N = 16 as in the default model
        abar = rng.uniform(0.05, 0.999, shape)
        bbar = rng.normal(size=shape)
        c = rng.normal(size=shape[:2] + (16,))
        x = rng.normal(size=shape[:3])
        dy = rng.normal(size=shape[:3])
        yield f"scan L={nl}", kernels.scan_nb, kernels.scan_np, (abar, bbar, c, x)
        yield f"prefix_scan L={nl}", kernels.prefix_scan_nb, kernels.prefix_scan_np, (abar, bbar, c, x)
        yield f"scan_backward L={nl}", kernels.scan_backward_nb, kernels.scan_backward_np, (abar, bbar, c, x, dy)
    a = rng.normal(size=(400, 16))
    b = rng.normal(size=(16, 16))
    yield "matmul 400x16x16", kernels.matmul_nb, kernels.matmul_np, (a, b)


def main():
    parser = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--seq-len", type=int, nargs="+", default=[100, 1000])
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    print(f"{'kernel':<24}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for name, nb, npf, fargs in cases(args.seq_len, rng):
        t_nb = best_of(nb, fargs, args.repeat)
        t_np = best_of(npf, fargs, args.repeat)
        print(f"{name:<24}{1e3 * t_nb:>12.3f}{1e3 * t_np:>12.3f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
