# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled patch kernels. Same signatures and accumulation order as _pykernels."""
import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


def im2col(floating[:, :, :, ::1] xp, int k, int s, int ho, int wo):
    cdef Py_ssize_t b = xp.shape[0], c = xp.shape[1]
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((b, c * k * k, ho * wo), dtype=dtype)
    cdef floating[:, :, ::1] cols = out
    cdef Py_ssize_t n, ch, i, j, oh, ow, row
    with nogil:
        for n in range(b):
            for ch in range(c):
                for i in range(k):
                    for j in range(k):
                        row = (ch * k + i) * k + j
                        for oh in range(ho):
                            for ow in range(wo):
                                cols[n, row, oh * wo + ow] = xp[n, ch, i + s * oh, j + s * ow]
    return out


def col2im(floating[:, :, ::1] cols, int hp, int wp, int k, int s, int ho, int wo):
    cdef Py_ssize_t b = cols.shape[0], c = cols.shape[1] // (k * k)
    dtype = np.float32 if floating is float else np.float64
    res = np.zeros((b, c, hp, wp), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = res
    cdef Py_ssize_t n, ch, i, j, oh, ow, row
    with nogil:
        for n in range(b):
            for ch in range(c):
                for i in range(k):
                    for j in range(k):
                        row = (ch * k + i) * k + j
                        for oh in range(ho):
                            for ow in range(wo):
                                dx[n, ch, i + s * oh, j + s * ow] += cols[n, row, oh * wo + ow]
    return res


def maxpool_forward(floating[:, :, :, ::1] xp, int k, int s, int ho, int wo):
    cdef Py_ssize_t b = xp.shape[0], c = xp.shape[1]
    dtype = np.float32 if floating is float else np.float64
    res = np.empty((b, c, ho, wo), dtype=dtype)
    ires = np.empty((b, c, ho, wo), dtype=np.int32)
    cdef floating[:, :, :, ::1] out = res
    cdef int[:, :, :, ::1] idx = ires
    cdef Py_ssize_t n, ch, i, j, oh, ow
    cdef floating best, v
    cdef int arg
    with nogil:
        for n in range(b):
            for ch in range(c):
                for oh in range(ho):
                    for ow in range(wo):
                        best = xp[n, ch, s * oh, s * ow]
                        arg = 0
                        for i in range(k):
                            for j in range(k):
                                v = xp[n, ch, i + s * oh, j + s * ow]
                                if v > best:
                                    best = v
                                    arg = i * k + j
                        out[n, ch, oh, ow] = best
                        idx[n, ch, oh, ow] = arg
    return res, ires


def maxpool_backward(floating[:, :, :, ::1] g, int[:, :, :, ::1] idx, int hp, int wp, int k, int s):
    cdef Py_ssize_t b = g.shape[0], c = g.shape[1], ho = g.shape[2], wo = g.shape[3]
    dtype = np.float32 if floating is float else np.float64
    res = np.zeros((b, c, hp, wp), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = res
    cdef Py_ssize_t n, ch, i, j, oh, ow
    cdef int a
    with nogil:
        for n in range(b):
            for ch in range(c):
                for i in range(k):
                    for j in range(k):
                        a = i * k + j
                        for oh in range(ho):
                            for ow in range(wo):
                                if idx[n, ch, oh, ow] == a:
                                    dx[n, ch, i + s * oh, j + s * ow] += g[n, ch, oh, ow]
    return res
