"""Compare the numba kernels against the pure-numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Shapes follow the full-size model (n=30, batch 16). Both paths must agree
before timings are reported.
"""

import argparse
import time

import numpy as np

from mscred import _accel


def best_of(fn, repeat):
    fn()  # warm-up (JIT compile, caches)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    # ConvLSTM level 1: 30x30 maps, X and H stacked to 64 channels, 3x3 kernel
    xp = rng.normal(size=(16, 32, 32, 64))
    yield "im2col 16x32x32x64 k3 s1", lambda: _accel._im2col_numba(xp, 3, 1, 30, 30), lambda: _accel._im2col_numpy(xp, 3, 1, 30, 30)

    xp2 = rng.normal(size=(16, 31, 31, 32))
    yield "im2col 16x31x31x32 k3 s2", lambda: _accel._im2col_numba(xp2, 3, 2, 15, 15), lambda: _accel._im2col_numpy(xp2, 3, 2, 15, 15)

    cols = rng.normal(size=(16 * 30 * 30, 9 * 64))
    yield (
        "col2im 16x32x32x64 k3 s1",
        lambda: _accel._col2im_numba(cols, 16, 32, 32, 64, 3, 1, 30, 30),
        lambda: _accel._col2im_numpy(cols, 16, 32, 32, 64, 3, 1, 30, 30),
    )

    x = rng.normal(size=(30, 20000))
    steps = np.arange(100, 20000, 10, dtype=np.int64)
    scales = np.array([10, 30, 60], dtype=np.int64)
    yield "signatures n=30 1990 steps", lambda: _accel._signature_numba(x, steps, scales), lambda: _accel._signature_numpy(x, steps, scales)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if not _accel.NUMBA_AVAILABLE:
        raise SystemExit("numba is not importable; nothing to compare")

    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':32s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, fast, ref in cases(rng):
        a, b = fast(), ref()
        err = np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300)
        if err > 1e-12:
            raise SystemExit(f"{name}: backends disagree (rel. error {err:.2e})")
        tn, tp = best_of(fast, args.repeat), best_of(ref, args.repeat)
        print(f"{name:32s} {tn * 1e3:10.2f} {tp * 1e3:10.2f} {tp / tn:8.2f}x")


if __name__ == "__main__":
    main()
