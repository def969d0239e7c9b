"""Fallback (and shared) kernel implementations.

``lcs_keep_flags`` has the same contract as the compiled ``_kernels``
extension and is selected by ``knowpilot.kernels`` when the extension is
unavailable or disabled; its plain-Python table fill is the part the
compiled core exists to speed up.  ``cosine_scores`` is the only
implementation of the scan: numpy/BLAS already wins there.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np


def cosine_scores(matrix: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Dot products of each row of ``matrix`` against ``query``.

    Both sides are expected unit-normalized float64, so the result is the
    cosine similarity per row.
    """
    return np.asarray(matrix, dtype=np.float64) @ np.asarray(query, dtype=np.float64)


def lcs_keep_flags(a: Sequence[int], b: Sequence[int]) -> tuple[list[int], list[int]]:
    """Mark which tokens of ``a`` and ``b`` belong to one longest common
    subsequence.

    Returns 0/1 flag lists for both sides.  The backtrack resolves ties by
    preferring to consume an inserted ``b`` token first, which after
    reversal yields delete-before-insert edit scripts; the compiled kernel
    implements the identical rule so both paths emit identical scripts.
    """
    n, m = len(a), len(b)
    width = m + 1
    dp = [0] * ((n + 1) * width)
    for i in range(1, n + 1):
        ai = a[i - 1]
        row = i * width
        prev = row - width
        for j in range(1, m + 1):
            if ai == b[j - 1]:
                dp[row + j] = dp[prev + j - 1] + 1
            else:
                up = dp[prev + j]
                left = dp[row + j - 1]
                dp[row + j] = up if up >= left else left
    keep_a = [0] * n
    keep_b = [0] * m
    i, j = n, m
    while i > 0 and j > 0:
        if a[i - 1] == b[j - 1]:
            keep_a[i - 1] = 1
            keep_b[j - 1] = 1
            i -= 1
            j -= 1
        elif dp[i * width + j - 1] >= dp[(i - 1) * width + j]:
            j -= 1
        else:
            i -= 1
    return keep_a, keep_b
