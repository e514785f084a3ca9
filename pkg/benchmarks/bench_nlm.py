"""Time the compiled NLM kernel against the numpy fallback.

    python benchmarks/bench_nlm.py --size 128 --repeat 3

Both backends run on the same seeded noisy image; the script also reports
the largest absolute difference between their outputs.
"""
import argparse
import time

import numpy as np

from ddx import kernels


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--size", type=int, nargs="+", default=[64, 128, 300])
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--h", type=float, default=0.06)
    p.add_argument("--threads", type=int, default=1)
    args = p.parse_args(argv)

    if kernels._nlm_ext is None:
        print("compiled kernel not built; only the numpy path is available")
    rng = np.random.default_rng(0)
    print(f"{'size':>6} {'numpy s':>10} {'cython s':>10} {'speedup':>8} {'max |diff|':>11}")
    for size in args.size:
        img = np.clip(rng.random((size, size, 3)) * 0.2 + 0.4 + rng.normal(0, 0.05, (size, size, 3)), 0, 1)
        t_np, out_np = best_of(lambda: kernels.nlm_denoise(img, args.h, backend="numpy"), args.repeat)
        if kernels._nlm_ext is None:
            print(f"{size:>6} {t_np:>10.3f} {'-':>10} {'-':>8} {'-':>11}")
            continue
        t_cy, out_cy = best_of(
            lambda: kernels.nlm_denoise(img, args.h, threads=args.threads, backend="cython"), args.repeat)
        diff = float(np.abs(out_np - out_cy).max())
        print(f"{size:>6} {t_np:>10.3f} {t_cy:>10.3f} {t_np / t_cy:>8.2f} {diff:>11.2e}")


if __name__ == "__main__":
    main()
