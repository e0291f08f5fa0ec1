"""Compare the numba and numpy paths of the imaging hot loops.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Both paths are called directly, so the BLOCKDIFF_NUMBA flag does not matter
here. The first numba call (JIT compile or cache load) is excluded.
"""
import argparse
import time

import numpy as np

from blockdiff import _kernels as K
from blockdiff.imaging.resample import resample_weights


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases():
    rng = np.random.default_rng(0)
    img = rng.random((1024, 1024 * 3))
    idx, wts = resample_weights(1024, 4096, "bicubic")
    yield "gather_weighted 1024->4096 rows x 3072", (
        lambda: K.gather_weighted_numpy(img, idx, wts),
        lambda: K.gather_weighted_numba(img, idx, wts),
    )
    idx, wts = resample_weights(4096, 1024, "bicubic")  # antialiased downscale: wide kernels
    big = rng.random((4096, 256))
    yield "gather_weighted 4096->1024 rows x 256", (
        lambda: K.gather_weighted_numpy(big, idx, wts),
        lambda: K.gather_weighted_numba(big, idx, wts),
    )
    # any byte string is a valid filtered stream; mix all five filter types
    raw = rng.integers(0, 256, (256, 1 + 256 * 3), dtype=np.uint8)
    raw[:, 0] = rng.integers(0, 5, 256)
    raw = raw.reshape(-1)
    yield "png_unfilter 256x256 rgb8", (
        lambda: K.png_unfilter_python(raw, 256, 256 * 3, 3),
        lambda: K.png_unfilter_numba(raw, 256, 256 * 3, 3)[0],
    )


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if K.numba is None:
        raise SystemExit("numba is not installed")
    print(f"{'kernel':44s} {'numpy':>10s} {'numba':>10s} {'speedup':>8s}")
    for name, (slow, fast) in cases():
        np.testing.assert_allclose(fast(), slow(), rtol=1e-12, atol=0)
        t_np, t_nb = best_of(slow, args.repeat), best_of(fast, args.repeat)
        print(f"{name:44s} {t_np * 1e3:9.2f}ms {t_nb * 1e3:9.2f}ms {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
