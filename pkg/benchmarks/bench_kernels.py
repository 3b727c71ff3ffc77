"""Time the numba kernels against their numpy counterparts.

Usage: python benchmarks/bench_kernels.py [--n 1000000] [--repeat 5]

Both implementations are called directly, so the environment flag that picks
the runtime backend does not matter here. The first numba call (compilation)
is excluded from the timings.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from talbotqkd import kernels


def _cases(n: int, rng: np.random.Generator):
    d, tau = 4, 284.7
    t = rng.normal(400.0, 1500.0, n)
    slot = np.array([0, 3, 2, 1], dtype=np.int64)
    grid = np.linspace(-4.0, 4.0, 4097)
    pdf = np.exp(-0.5 * grid**2)
    cdf = np.concatenate([[0.0], np.cumsum(pdf)])[:-1]
    cdf = np.tile(cdf / cdf[-1], (8, 1))
    table = rng.integers(0, 8, n)
    u = rng.random(n)
    counts = rng.poisson(1.0, n // 4)
    times = rng.random(int(counts.sum()))
    ts = np.sort(rng.integers(0, 6000 * (n // 2), n))
    return {
        "classify_x": (t, 142.3, tau, slot, -2073.6, 2928.4),
        "classify_z": (t, d, tau),
        "sample_inverse_cdf": (cdf, table, u, -4.0, grid[1] - grid[0]),
        "first_arrival": (counts, times),
        "first_event_per_frame": (ts, 6000, 0),
        "fold_histogram": (ts, 6000, 10, 600),
    }


def _identical(a, b) -> bool:
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return all(np.array_equal(x, y, equal_nan=x.dtype.kind == "f") for x, y in zip(a, b))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=1_000_000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if kernels.numba_impl is None:
        raise SystemExit("numba is not installed")
    cases = _cases(args.n, np.random.default_rng(0))
    print(f"n = {args.n}, best of {args.repeat}")
    print(f"{'kernel':<24}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, call_args in cases.items():
        f_np = getattr(kernels.numpy_impl, name)
        f_nb = getattr(kernels.numba_impl, name)
        ref = f_np(*call_args)
        got = f_nb(*call_args)  # compiles
        same = _identical(ref, got)
        t_np = min(timeit.repeat(lambda: f_np(*call_args), number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: f_nb(*call_args), number=1, repeat=args.repeat)) * 1e3
        flag = "" if same else "  MISMATCH"
        print(f"{name:<24}{t_np:>12.2f}{t_nb:>12.2f}{t_np / t_nb:>9.1f}x{flag}")


if __name__ == "__main__":
    main()
