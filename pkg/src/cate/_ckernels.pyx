# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: top-k selection, fused cosine scoring, Mann-Whitney AUC."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def topk_indices(scores, Py_ssize_t k):
    cdef const double[::1] s = np.ascontiguousarray(scores, dtype=np.float64)
    cdef Py_ssize_t n = s.shape[0]
    if k > n:
        k = n
    if k <= 0:
        return np.empty(0, dtype=np.int64)
    out = np.empty(k, dtype=np.int64)
    cdef cnp.int64_t[::1] idx = out
    cdef Py_ssize_t filled = 0, i, j
    cdef double v
    # insertion into a sorted buffer of size k; strict > keeps earlier index on ties
    for i in range(n):
        v = s[i]
        if filled == k and not (v > s[idx[k - 1]]):
            continue
        j = filled if filled < k else k - 1
        while j > 0 and v > s[idx[j - 1]]:
            idx[j] = idx[j - 1]
            j -= 1
        idx[j] = i
        if filled < k:
            filled += 1
    return out


def cosine_max_scores(features, anchors):
    cdef const double[:, ::1] x = np.ascontiguousarray(features, dtype=np.float64)
    cdef const double[:, ::1] a = np.ascontiguousarray(anchors, dtype=np.float64)
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], m = a.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] res = out
    cdef Py_ssize_t i, j, d
    cdef double norm, dot, best
    for i in range(n):
        norm = 0.0
        for d in range(c):
            norm += x[i, d] * x[i, d]
        norm = sqrt(norm)
        if norm == 0.0:
            norm = 1.0
        best = -1e300
        for j in range(m):
            dot = 0.0
            for d in range(c):
                dot += x[i, d] * a[j, d]
            dot /= norm
            if dot > best:
                best = dot
        res[i] = best
    return out


def mann_whitney_auc(scores, labels):
    cdef const double[::1] s = np.ascontiguousarray(scores, dtype=np.float64)
    lab = np.ascontiguousarray(np.asarray(labels).astype(np.uint8))
    cdef const cnp.uint8_t[::1] y = lab
    cdef Py_ssize_t n = s.shape[0]
    cdef cnp.int64_t[::1] order = np.argsort(s, kind="stable").astype(np.int64)
    cdef Py_ssize_t i = 0, j, t
    cdef double rank_sum = 0.0, mid
    cdef Py_ssize_t n_pos = 0, pos_in_group
    for t in range(n):
        n_pos += y[t]
    while i < n:
        j = i
        pos_in_group = 0
        while j < n and s[order[j]] == s[order[i]]:
            pos_in_group += y[order[j]]
            j += 1
        mid = (i + 1 + j) / 2.0
        rank_sum += mid * pos_in_group
        i = j
    cdef double u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * (n - n_pos))
