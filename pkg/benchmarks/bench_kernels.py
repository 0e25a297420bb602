"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Prints one line per kernel and shape with median wall time per call for each
backend, the speedup, and the max absolute difference between outputs.
"""
import argparse
import timeit

import numpy as np

from fedsimclr import _kernels_py

try:
    from fedsimclr import _kernels
except ImportError:
    _kernels = None


def cosine_case(k, d, rng):
    return (rng.normal(size=(k, d)), rng.normal(size=(k, d)), 0.5, 1e-12)


def table_case(n, k, states, clients, rng):
    critic = rng.normal(size=(clients, states, states))
    s = rng.integers(0, clients, size=n)
    i1 = rng.integers(0, states, size=(n, k))
    i2 = rng.integers(0, states, size=(n, k))
    return critic, s, i1, i2


def max_diff(a, b):
    if isinstance(a, tuple):
        return max(max_diff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def bench(name, fn_name, args, repeat):
    py = getattr(_kernels_py, fn_name)
    t_py = np.median(timeit.repeat(lambda: py(*args), number=1, repeat=repeat))
    line = f"{name:<36} python {t_py * 1e3:9.3f} ms"
    if _kernels is not None:
        cy = getattr(_kernels, fn_name)
        t_cy = np.median(timeit.repeat(lambda: cy(*args), number=1, repeat=repeat))
        diff = max_diff(py(*args), cy(*args))
        line += f"  cython {t_cy * 1e3:9.3f} ms  speedup {t_py / t_cy:6.2f}x  max|diff| {diff:.1e}"
    else:
        line += "  cython (extension not built)"
    print(line)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    args = p.parse_args()
    rng = np.random.default_rng(0)
    for k, d in [(32, 16), (128, 16), (512, 32)]:
        bench(f"cosine_infonce K={k} d={d}", "cosine_infonce", cosine_case(k, d, rng), args.repeat)
    for n, k in [(2000, 2), (2000, 32), (4000, 128)]:
        bench(f"infonce_table_terms n={n} K={k}", "infonce_table_terms",
              table_case(n, k, 6, 4, rng), args.repeat)


if __name__ == "__main__":
    main()
