"""Compare the compiled kernels with their numpy/pure-Python twins.

    python benchmarks/bench_kernels.py [--repeat 5] [--threads 4]

Each kernel runs on identical inputs through both backends; the script checks
the outputs are bit-identical and prints the best wall time of each.
"""
import argparse
import time

import numpy as np

from dmquant import _fallback
from dmquant.core import Rng

try:
    from dmquant import _kernels
except ImportError:
    _kernels = None


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        result = fn()
        times.append(time.perf_counter() - t0)
    return min(times), result


def cases(threads):
    rng = Rng(0)
    a, b = rng.normal((512, 160)), rng.normal((160, 128))
    x = rng.normal((128, 20000)) * 3.0
    scale = np.full(128, 0.02)
    zp = np.arange(128, dtype=np.float64) - 64.0

    def normals(mod):
        out = np.empty(200_000)
        mod.pcg32_normals(rng.state, rng.inc, False, 0.0, out)
        return out

    def matmul(mod):
        out = np.empty((512, 128))
        mod.matmul(a, b, out, threads)
        return out

    def qdq(mod):
        out = np.empty_like(x)
        mod.quant_dequant_rows(x, scale, zp, -128.0, 127.0, out, threads)
        return out

    return [("pcg32 normals (2e5)", normals), ("matmul 512x160x128", matmul),
            ("fake-quant 128x20000", qdq)]


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--threads", type=int, default=1)
    args = p.parse_args(argv)
    if _kernels is None:
        print("compiled extension not built; nothing to compare")
        return 1
    print(f"{'kernel':24s} {'compiled':>11s} {'fallback':>11s} {'speedup':>8s}  identical")
    for name, fn in cases(args.threads):
        tc, rc = best_of(lambda: fn(_kernels), args.repeat)
        tp, rp = best_of(lambda: fn(_fallback), max(1, args.repeat // 2))
        same = np.array_equal(rc, rp)
        print(f"{name:24s} {tc * 1e3:9.2f}ms {tp * 1e3:9.2f}ms {tp / tc:7.1f}x  {same}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
