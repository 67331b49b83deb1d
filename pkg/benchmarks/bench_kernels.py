"""Compare the Cython and pure-numpy kernel backends.

Usage::

    python3 benchmarks/bench_kernels.py [--sizes 64 128 256] [--repeat 5]

Times one block of red-black SOR sweeps, one multigrid-preconditioned
solve, and a full two-frame flow estimate with each backend, then prints
the speed-up of the compiled kernels.
"""
import argparse
import contextlib
import timeit

import numpy as np
from scipy.ndimage import gaussian_filter

from flowgauge import kernels
from flowgauge.flow import solve_flow
from flowgauge.image import pixel_grid, sample
from flowgauge.kernels import _multigrid


def random_system(n, seed=0):
    rng = np.random.default_rng(seed)
    gx, gy = rng.normal(size=(n, n)), rng.normal(size=(n, n))
    m = rng.random((n, n)) * 0.1
    return (gx * gx + m, gx * gy, gy * gy + m, rng.normal(size=(n, n)), rng.normal(size=(n, n)),
            rng.uniform(0.1, 2.0, (n, n - 1)), rng.uniform(0.1, 2.0, (n - 1, n)))


@contextlib.contextmanager
def backend(module):
    saved = kernels._impl
    kernels._impl = module
    try:
        yield
    finally:
        kernels._impl = saved


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench_size(n, repeat, impls):
    system = random_system(n)
    rng = np.random.default_rng(1)
    i1 = 0.1 + 0.8 * gaussian_filter(rng.random((n, n)), 1.5)
    xs, ys = pixel_grid(i1.shape)
    i2 = sample(i1, xs - 0.6, ys - 0.3)
    rows = {}
    for name, module in impls:
        def sor():
            module.sor_solve(np.zeros((n, n)), np.zeros((n, n)), *system, 30, 1.6)

        def mg():
            _multigrid.multigrid_solve(module.sor_solve, np.zeros((n, n)), np.zeros((n, n)), *system, 30, 1.6)

        def flow():
            with backend(module):
                solve_flow(i1, i2)

        rows[name] = (best_of(sor, repeat), best_of(mg, repeat), best_of(flow, max(1, repeat // 2)))
    return rows


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", type=int, nargs="+", default=[64, 128, 256])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)

    impls = [("python", kernels.python)]
    if kernels.compiled is not None:
        impls.append(("cython", kernels.compiled))
    else:
        print("compiled extension not built; timing the numpy backend only")

    print(f"{'size':>6} {'backend':>8} {'30 SOR sweeps':>14} {'MG-PCG solve':>13} {'solve_flow':>11}")
    for n in args.sizes:
        rows = bench_size(n, args.repeat, impls)
        for name, (t_sor, t_mg, t_flow) in rows.items():
            print(f"{n:>6} {name:>8} {t_sor * 1e3:>12.2f}ms {t_mg * 1e3:>11.2f}ms {t_flow:>10.3f}s")
        if len(rows) == 2:
            speed = [p / c for p, c in zip(rows["python"], rows["cython"])]
            print(f"{n:>6} {'speed-up':>8} {speed[0]:>13.1f}x {speed[1]:>12.1f}x {speed[2]:>10.1f}x")


if __name__ == "__main__":
    main()
