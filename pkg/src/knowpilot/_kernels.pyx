# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernel: LCS token alignment for the word-level diff.

The DP fill is quadratic and strictly sequential, which pure Python runs
two orders of magnitude slower (see benchmarks/bench_kernels.py); the
cosine scan stays on numpy/BLAS in both backends because a hand loop loses
to BLAS there.  The backtrack tie-break mirrors _kernels_py exactly so both
backends emit identical scripts.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def lcs_keep_flags(a_seq, b_seq):
    cdef cnp.ndarray[cnp.int32_t, ndim=1] a = np.asarray(a_seq, dtype=np.int32)
    cdef cnp.ndarray[cnp.int32_t, ndim=1] b = np.asarray(b_seq, dtype=np.int32)
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t m = b.shape[0]
    cdef Py_ssize_t width = m + 1
    cdef cnp.ndarray[cnp.int32_t, ndim=1] dp = np.zeros((n + 1) * width, dtype=np.int32)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] keep_a = np.zeros(n, dtype=np.uint8)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] keep_b = np.zeros(m, dtype=np.uint8)
    cdef Py_ssize_t i, j, row, prev
    cdef cnp.int32_t ai, up, left
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
    i = n
    j = m
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
    return keep_a.tolist(), keep_b.tolist()
