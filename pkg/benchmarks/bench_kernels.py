"""Time the numba kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Each row reports the median wall time of both paths on identical inputs and
checks that their outputs match bit for bit. The first numba call is made
before timing so compilation is excluded.
"""
from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from coforge import kernels


def _median_time(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return statistics.median(times)


def cases(rng: np.random.Generator):
    for n, f, k in ((256, 3, 16), (1024, 3, 20), (1024, 64, 20)):
        x = rng.standard_normal((n, f)).astype(np.float32)
        yield f"knn n={n} f={f} k={k}", kernels.knn_numpy, kernels.knn_numba, (x, k)
    for n, f, k in ((1024, 64, 20), (4096, 128, 16)):
        x = rng.standard_normal((n, f)).astype(np.float32)
        nbr = rng.integers(0, n, (n, k))
        yield f"aggregate max n={n} f={f} k={k}", kernels.aggregate_numpy, kernels.aggregate_numba, (x, nbr, 0)
    for s, b in ((5, 64), (12, 256)):
        d = rng.uniform(0.001, 0.05, s)
        r = rng.integers(0, 4, s)
        yield f"schedule stages={s} batches={b}", kernels.schedule_numpy, kernels.schedule_numba, (d, r, b, 2)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if not kernels.HAVE_NUMBA:
        print("numba is not importable; only the numpy path exists")
        return
    print(f"{'kernel':<36} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}  same")
    for name, slow, fast, inputs in cases(np.random.default_rng(args.seed)):
        fast(*inputs)
        a, b = slow(*inputs), fast(*inputs)
        same = all(np.array_equal(u, v) for u, v in zip(a, b)) if isinstance(a, tuple) else np.array_equal(a, b)
        t_np = _median_time(lambda: slow(*inputs), args.repeat)
        t_nb = _median_time(lambda: fast(*inputs), args.repeat)
        print(f"{name:<36} {t_np * 1e3:>10.3f} {t_nb * 1e3:>10.3f} {t_np / t_nb:>7.1f}x  {same}")


if __name__ == "__main__":
    main()
