# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled store-and-forward kernel; see ``_pipeline_py`` for the reference."""

from libc.stdint cimport int64_t

import numpy as np

cdef int64_t NS_PER_S = 1000000000


def hop_arrivals(const int64_t[::1] ready, const int64_t[::1] sizes, int64_t prop_ns,
                 int64_t free_at, const int64_t[::1] sched_t, const int64_t[::1] sched_r):
    cdef Py_ssize_t n = ready.shape[0]
    cdef Py_ssize_t m = sched_t.shape[0]
    cdef Py_ssize_t i, j = 0
    cdef int64_t start, rate
    out = np.empty(n, dtype=np.int64)
    cdef int64_t[::1] arr = out
    for i in range(n):
        start = ready[i] if ready[i] > free_at else free_at
        while j + 1 < m and sched_t[j + 1] <= start:
            j += 1
        rate = sched_r[j]
        free_at = start + (sizes[i] * 8 * NS_PER_S + rate - 1) // rate
        arr[i] = free_at + prop_ns
    return out, free_at
