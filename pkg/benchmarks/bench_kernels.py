"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--scale 1.0]

Each kernel runs on identical inputs under both backends; outputs are checked
for agreement before timings are reported.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from beat import _pykernels

try:
    from beat import _ckernels
except ImportError:
    _ckernels = None


def cases(scale: float, rng: np.random.Generator):
    n = max(16, int(4096 * scale))
    x = rng.standard_normal((n, 16))
    code = rng.standard_normal((512, 16))
    yield "nearest 4096x16 vs 512", "nearest", (x, code)

    users, items, e = int(2000 * scale) or 1, int(1000 * scale) or 1, int(25000 * scale) or 1
    rows = rng.integers(0, users, e)
    cols = rng.integers(0, items, e)
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    indptr = np.zeros(users + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    indptr = np.cumsum(indptr)
    vals = rng.random(e)
    table = rng.standard_normal((items, 96))
    yield "csr_matmul 25k nnz x 96", "csr_matmul", (indptr, cols.astype(np.int64), vals, table)

    idx = rng.integers(0, users, e).astype(np.int64)
    src = rng.standard_normal((e, 96))
    yield "index_add 25k rows x 96", "index_add", (users, idx, src)


def agree(a, b) -> bool:
    if isinstance(a, tuple):
        return all(agree(x, y) for x, y in zip(a, b))
    return np.array_equal(a, b) if a.dtype.kind == "i" else np.allclose(a, b, rtol=1e-12, atol=1e-12)


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--scale", type=float, default=1.0)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    if _ckernels is None:
        print("compiled extension not built; only the fallback can be timed")
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<28}{'numpy ms':>12}{'cython ms':>12}{'speedup':>10}")
    for label, name, inputs in cases(args.scale, rng):
        py = getattr(_pykernels, name)
        t_py = min(timeit.repeat(lambda: py(*inputs), number=1, repeat=args.repeat)) * 1e3
        if _ckernels is None:
            print(f"{label:<28}{t_py:>12.2f}{'-':>12}{'-':>10}")
            continue
        cy = getattr(_ckernels, name)
        if not agree(py(*inputs), cy(*inputs)):
            raise SystemExit(f"{name}: backends disagree")
        t_cy = min(timeit.repeat(lambda: cy(*inputs), number=1, repeat=args.repeat)) * 1e3
        print(f"{label:<28}{t_py:>12.2f}{t_cy:>12.2f}{t_py / t_cy:>9.1f}x")


if __name__ == "__main__":
    main()
