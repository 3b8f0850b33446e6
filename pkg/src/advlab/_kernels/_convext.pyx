# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled convolution kernels: direct loops over valid-padding windows.

Each kernel walks one sample at a time; for every filter tap (ci, a, b) the
strided input window is gathered once into a contiguous [ho*wo] scratch plane,
so the hot loops are long unit-stride FMA runs regardless of stride.
"""

import numpy as np

BACKEND_NAME = "compiled"


def conv_fwd(double[:, :, :, ::1] x, double[:, :, :, ::1] w, Py_ssize_t stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t f = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = (h - kh) // stride + 1
    cdef Py_ssize_t wo = (wd - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    cdef double[:, :, :, ::1] y4 = out
    cdef double[:, :, ::1] yv = out.reshape(n, f, ho * wo)
    cdef double[::1] plane = np.empty(ho * wo)
    cdef Py_ssize_t ni, fi, ci, a, b, i, j, t, m = ho * wo
    cdef double wv
    for ni in range(n):
        for ci in range(c):
            for a in range(kh):
                for b in range(kw):
                    t = 0
                    for i in range(ho):
                        for j in range(wo):
                            plane[t] = x[ni, ci, i * stride + a, j * stride + b]
                            t += 1
                    for fi in range(f):
                        wv = w[fi, ci, a, b]
                        for t in range(m):
                            yv[ni, fi, t] += wv * plane[t]
    return out


def conv_bwd_input(double[:, :, :, ::1] gy, double[:, :, :, ::1] w,
                   Py_ssize_t stride, Py_ssize_t h, Py_ssize_t wd):
    cdef Py_ssize_t n = gy.shape[0], f = gy.shape[1], ho = gy.shape[2], wo = gy.shape[3]
    cdef Py_ssize_t c = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    out = np.zeros((n, c, h, wd))
    cdef double[:, :, :, ::1] gx = out
    cdef double[:, :, ::1] gyv = np.ascontiguousarray(gy).reshape(n, f, ho * wo)
    cdef double[::1] plane = np.empty(ho * wo)
    cdef Py_ssize_t ni, fi, ci, a, b, i, j, t, m = ho * wo
    cdef double wv
    for ni in range(n):
        for ci in range(c):
            for a in range(kh):
                for b in range(kw):
                    for t in range(m):
                        plane[t] = 0.0
                    for fi in range(f):
                        wv = w[fi, ci, a, b]
                        for t in range(m):
                            plane[t] += wv * gyv[ni, fi, t]
                    t = 0
                    for i in range(ho):
                        for j in range(wo):
                            gx[ni, ci, i * stride + a, j * stride + b] += plane[t]
                            t += 1
    return out


def conv_bwd_weight(double[:, :, :, ::1] gy, double[:, :, :, ::1] x,
                    Py_ssize_t stride, Py_ssize_t kh, Py_ssize_t kw):
    cdef Py_ssize_t n = gy.shape[0], f = gy.shape[1], ho = gy.shape[2], wo = gy.shape[3]
    cdef Py_ssize_t c = x.shape[1]
    out = np.zeros((f, c, kh, kw))
    cdef double[:, :, :, ::1] gw = out
    cdef double[:, :, ::1] gyv = np.ascontiguousarray(gy).reshape(n, f, ho * wo)
    cdef double[::1] plane = np.empty(ho * wo)
    cdef Py_ssize_t ni, fi, ci, a, b, i, j, t, m = ho * wo
    cdef Py_ssize_t m8 = m - (m % 8)
    cdef double s0, s1, s2, s3, s4, s5, s6, s7
    for ni in range(n):
        for ci in range(c):
            for a in range(kh):
                for b in range(kw):
                    t = 0
                    for i in range(ho):
                        for j in range(wo):
                            plane[t] = x[ni, ci, i * stride + a, j * stride + b]
                            t += 1
                    for fi in range(f):
                        # eight fixed partial sums: the reduction stays
                        # deterministic but no longer serializes on one chain
                        s0 = s1 = s2 = s3 = s4 = s5 = s6 = s7 = 0.0
                        for t in range(0, m8, 8):
                            s0 += plane[t] * gyv[ni, fi, t]
                            s1 += plane[t + 1] * gyv[ni, fi, t + 1]
                            s2 += plane[t + 2] * gyv[ni, fi, t + 2]
                            s3 += plane[t + 3] * gyv[ni, fi, t + 3]
                            s4 += plane[t + 4] * gyv[ni, fi, t + 4]
                            s5 += plane[t + 5] * gyv[ni, fi, t + 5]
                            s6 += plane[t + 6] * gyv[ni, fi, t + 6]
                            s7 += plane[t + 7] * gyv[ni, fi, t + 7]
                        for t in range(m8, m):
                            s0 += plane[t] * gyv[ni, fi, t]
                        gw[fi, ci, a, b] += (((s0 + s1) + (s2 + s3))
                                             + ((s4 + s5) + (s6 + s7)))
    return out
