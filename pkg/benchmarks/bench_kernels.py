#!/usr/bin/env python3
"""Benchmark the compiled diff kernel against the pure fallback, and show
why the cosine scan stays on numpy.

The LCS table fill is the loop worth compiling (two orders of magnitude);
the brute-force cosine scan is a BLAS matmul that a hand-written loop only
slows down, which is the measurement that pinned that design.  Run from
the repo root:

    python benchmarks/bench_kernels.py [--sizes small|full]
"""

from __future__ import annotations

import argparse
import random
import time

import numpy as np

from knowpilot import _kernels_py

try:
    from knowpilot import _kernels
except ImportError:
    _kernels = None


def timeit(fn, repeats: int = 5) -> float:
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def bench_cosine(n_chunks: int, dim: int) -> list[tuple[str, float]]:
    rng = np.random.default_rng(0)
    matrix = rng.normal(size=(n_chunks, dim))
    matrix /= np.linalg.norm(matrix, axis=1, keepdims=True)
    matrix = np.ascontiguousarray(matrix)
    query = rng.normal(size=dim)
    query /= np.linalg.norm(query)
    query = np.ascontiguousarray(query)
    return [
        ("numpy (both backends)", timeit(lambda: _kernels_py.cosine_scores(matrix, query)))
    ]


def bench_lcs(n_tokens: int, vocab: int) -> list[tuple[str, float]]:
    rng = random.Random(0)
    a = [rng.randrange(vocab) for _ in range(n_tokens)]
    b = list(a)
    for _ in range(n_tokens // 5):  # realistic edit density
        b[rng.randrange(len(b))] = rng.randrange(vocab)

    rows = [("fallback (pure python)", timeit(lambda: _kernels_py.lcs_keep_flags(a, b), 3))]
    if _kernels is not None:
        rows.append(("compiled", timeit(lambda: _kernels.lcs_keep_flags(a, b), 3)))
        assert _kernels.lcs_keep_flags(a, b) == _kernels_py.lcs_keep_flags(a, b)
    return rows


def print_block(title: str, rows: list[tuple[str, float]]) -> None:
    print(f"\n{title}")
    base = rows[0][1]
    for name, seconds in rows:
        speed = base / seconds if seconds else float("inf")
        print(f"  {name:<24} {seconds * 1000:9.2f} ms   x{speed:5.1f}")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--sizes", choices=("small", "full"), default="full")
    args = parser.parse_args()

    if _kernels is None:
        print("note: compiled extension not built; showing fallback only")

    if args.sizes == "small":
        cosine_cases = [(10_000, 384)]
        lcs_cases = [(800, 500)]
    else:
        cosine_cases = [(10_000, 384), (100_000, 384)]
        lcs_cases = [(800, 500), (2_000, 1_000), (4_000, 2_000)]

    for n, dim in cosine_cases:
        print_block(f"cosine scan: {n:,} chunks x {dim} dims", bench_cosine(n, dim))
    for tokens, vocab in lcs_cases:
        print_block(
            f"LCS diff: {tokens:,} tokens vs {tokens:,} tokens",
            bench_lcs(tokens, vocab),
        )


if __name__ == "__main__":
    main()
