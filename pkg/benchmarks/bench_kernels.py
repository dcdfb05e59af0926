"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import time

import numpy as np

from domainsmooth import kernels
from domainsmooth.numkit import make_rng


def _best(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def cases():
    rng = make_rng(0)
    m = rng.standard_normal((64, 64))
    q = rng.integers(0, 2**63, size=(300, 1), dtype=np.uint64)
    g = rng.integers(0, 2**63, size=(3000, 1), dtype=np.uint64)
    ske = rng.standard_normal((48, 64))
    img = rng.standard_normal((48, 64))
    y = rng.integers(0, 20, 48)

    def svd(mod):
        cols, v = np.ascontiguousarray(m.T), np.eye(64)
        mod.jacobi_sweeps(cols, v, 1e-12, 100)

    def hamming(mod):
        mod.hamming_distances(q, g)

    def bank(mod):
        vecs = np.zeros((20, 10, 64))
        cnt = np.zeros((20, 10), dtype=np.int64)
        sizes = np.zeros(20, dtype=np.int64)
        nxt = 0
        for _ in range(20):
            nxt = mod.bank_update_batch(vecs, cnt, sizes, nxt, ske, y, img, y)

    return {"jacobi svd 64x64": svd, "hamming 300x3000 (64 bit)": hamming, "bank 20 batches of 48": bank}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = kernels.backends()
    print(f"active backend: {kernels.BACKEND}")
    print(f"{'kernel':<28}" + "".join(f"{b:>12}" for b in sorted(backends)) + f"{'speedup':>10}")
    for name, fn in cases().items():
        t = {b: _best(lambda: fn(mod), args.repeat) for b, mod in backends.items()}
        speed = f"{t['python'] / t['cython']:>9.1f}x" if len(t) == 2 else f"{'-':>10}"
        print(f"{name:<28}" + "".join(f"{t[b] * 1e3:>10.2f}ms" for b in sorted(t)) + speed)


if __name__ == "__main__":
    main()
