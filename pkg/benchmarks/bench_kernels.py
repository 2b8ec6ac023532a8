"""Time each hot kernel through its numba and numpy paths.

Run with ``python benchmarks/bench_kernels.py [--repeat N]``. The first numba
call compiles (or loads the on-disk cache) and is excluded from the timings.
"""
import argparse
import time

import numpy as np

from featureness import datagen, kernels


def bench(fn, args, repeat):
    fn(*args)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append((time.perf_counter() - t0) * 1000.0)
    return float(np.median(times))


def cases(rng):
    img = datagen.gen_texture_image(rng, (240, 320)).astype(np.float64)
    gy, gx = np.mgrid[0:240, 0:320].astype(np.float64)
    xs = gx + rng.uniform(-1.5, 1.5, gx.shape)
    ys = gy + rng.uniform(-1.5, 1.5, gy.shape)
    order = rng.permutation(240 * 320)[:5000]
    ys_c, xs_c = np.unravel_index(order, (240, 320))
    a = rng.integers(0, 256, (600, 32), dtype=np.uint8)
    b = rng.integers(0, 256, (600, 32), dtype=np.uint8)
    return [
        ("bilinear 320x240", kernels.bilinear_sample_nb, kernels.bilinear_sample_np, (img, xs, ys)),
        ("fast score 320x240", kernels.fast_score_nb, kernels.fast_score_np, (img, 0.08, 9)),
        ("greedy nms 5000 pts", kernels.greedy_nms_nb, kernels.greedy_nms_np,
         (ys_c.astype(np.int64), xs_c.astype(np.int64), 240, 320, 5, 0)),
        ("hamming 600x600", kernels.hamming_matrix_nb, kernels.hamming_matrix_np, (a, b)),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<22}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for name, fnb, fnp, fargs in cases(rng):
        t_nb = bench(fnb, fargs, args.repeat)
        t_np = bench(fnp, fargs, args.repeat)
        print(f"{name:<22}{t_nb:>10.2f}{t_np:>10.2f}{t_np / max(t_nb, 1e-9):>8.1f}x")


if __name__ == "__main__":
    main()
