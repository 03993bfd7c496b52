# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops for tree packing.

Must stay signature- and result-identical to ``ttkit._pykernels``.
"""

import numpy as np

cimport numpy as cnp
from libc.string cimport memset

cnp.import_array()


def common_prefix(const long long[:] a_keys, const long long[:] a_bits,
                  const long long[:] b_keys, const long long[:] b_bits):
    cdef Py_ssize_t n = min(a_keys.shape[0], b_keys.shape[0])
    cdef Py_ssize_t i
    for i in range(n):
        if a_keys[i] != b_keys[i] or a_bits[i] != b_bits[i]:
            return i
    return n


cdef Py_ssize_t _ancestors(Py_ssize_t s, const long long[:] seg_parent,
                           long long[:] out) noexcept:
    cdef Py_ssize_t depth = 0
    cdef long long p = seg_parent[s]
    while p >= 0:
        out[depth] = p
        depth += 1
        p = seg_parent[p]
    return depth


def tree_mask(const long long[:] seg_of_token, const long long[:] seg_parent,
              const long long[:] seg_start, const long long[:] seg_end):
    cdef Py_ssize_t T = seg_of_token.shape[0]
    cdef Py_ssize_t S = seg_parent.shape[0]
    out = np.zeros((T, T), dtype=np.bool_)
    cdef cnp.npy_bool[:, :] m = out
    cdef long long[:] anc = np.empty(S + 1, dtype=np.int64)
    cdef Py_ssize_t s, i, k, depth, a, start
    for s in range(S):
        start = seg_start[s]
        if seg_end[s] <= start:
            continue
        depth = _ancestors(s, seg_parent, anc)
        for i in range(start, seg_end[s]):
            for k in range(depth):
                a = anc[k]
                if seg_end[a] > seg_start[a]:
                    memset(&m[i, seg_start[a]], 1, seg_end[a] - seg_start[a])
            memset(&m[i, start], 1, i - start + 1)
    return out


def mask_rows(const long long[:] rows, const long long[:] seg_of_token,
              const long long[:] seg_parent, const long long[:] seg_start,
              const long long[:] seg_end):
    cdef Py_ssize_t R = rows.shape[0]
    cdef Py_ssize_t T = seg_of_token.shape[0]
    cdef Py_ssize_t S = seg_parent.shape[0]
    out = np.zeros((R, T), dtype=np.bool_)
    cdef cnp.npy_bool[:, :] m = out
    cdef long long[:] anc = np.empty(S + 1, dtype=np.int64)
    cdef Py_ssize_t r, i, s, k, depth, a
    for r in range(R):
        i = rows[r]
        s = seg_of_token[i]
        depth = _ancestors(s, seg_parent, anc)
        for k in range(depth):
            a = anc[k]
            if seg_end[a] > seg_start[a]:
                memset(&m[r, seg_start[a]], 1, seg_end[a] - seg_start[a])
        memset(&m[r, seg_start[s]], 1, i - seg_start[s] + 1)
    return out


def predecessors(const long long[:] seg_of_token, const long long[:] seg_parent,
                 const long long[:] seg_start, const long long[:] seg_end):
    cdef Py_ssize_t T = seg_of_token.shape[0]
    out = np.full(T, -1, dtype=np.int64)
    cdef long long[:] pred = out
    cdef Py_ssize_t i, s
    cdef long long p
    for i in range(T):
        s = seg_of_token[i]
        if i > seg_start[s]:
            pred[i] = i - 1
            continue
        p = seg_parent[s]
        while p >= 0 and seg_end[p] <= seg_start[p]:
            p = seg_parent[p]
        if p >= 0:
            pred[i] = seg_end[p] - 1
    return out
