# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled patch gather/scatter kernels (see reference.py for semantics)."""

import numpy as np

cimport cython

ctypedef fused floating:
    float
    double


def im2col2d(floating[:, :, :, ::1] xpad, Py_ssize_t kh, Py_ssize_t kw,
             Py_ssize_t sh, Py_ssize_t sw, Py_ssize_t oh, Py_ssize_t ow,
             floating[:, :, :, ::1] cols):
    cdef Py_ssize_t n = xpad.shape[0], c = xpad.shape[1]
    cdef Py_ssize_t b, ch, i, j, oy, ox, k, row
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        k = i * kw + j
                        for oy in range(oh):
                            row = oy * sh + i
                            for ox in range(ow):
                                cols[b, ch, k, oy * ow + ox] = xpad[b, ch, row, ox * sw + j]


def col2im2d(floating[:, :, :, ::1] cols, floating[:, :, :, ::1] out,
             Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t sh, Py_ssize_t sw,
             Py_ssize_t oh, Py_ssize_t ow):
    cdef Py_ssize_t n = out.shape[0], c = out.shape[1]
    cdef Py_ssize_t b, ch, i, j, oy, ox, k, row
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        k = i * kw + j
                        for oy in range(oh):
                            row = oy * sh + i
                            for ox in range(ow):
                                out[b, ch, row, ox * sw + j] += cols[b, ch, k, oy * ow + ox]


def im2col3d(floating[:, :, :, :, ::1] xpad, Py_ssize_t kh, Py_ssize_t kw,
             Py_ssize_t kd, Py_ssize_t sh, Py_ssize_t sw, Py_ssize_t sd,
             Py_ssize_t oh, Py_ssize_t ow, Py_ssize_t od,
             floating[:, :, :, ::1] cols):
    cdef Py_ssize_t n = xpad.shape[0], c = xpad.shape[1]
    cdef Py_ssize_t b, ch, i, j, k, oy, ox, oz, w, row, col
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        for k in range(kd):
                            w = (i * kw + j) * kd + k
                            for oy in range(oh):
                                row = oy * sh + i
                                for ox in range(ow):
                                    col = ox * sw + j
                                    for oz in range(od):
                                        cols[b, ch, w, (oy * ow + ox) * od + oz] = \
                                            xpad[b, ch, row, col, oz * sd + k]


def col2im3d(floating[:, :, :, ::1] cols, floating[:, :, :, :, ::1] out,
             Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t kd,
             Py_ssize_t sh, Py_ssize_t sw, Py_ssize_t sd,
             Py_ssize_t oh, Py_ssize_t ow, Py_ssize_t od):
    cdef Py_ssize_t n = out.shape[0], c = out.shape[1]
    cdef Py_ssize_t b, ch, i, j, k, oy, ox, oz, w, row, col
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        for k in range(kd):
                            w = (i * kw + j) * kd + k
                            for oy in range(oh):
                                row = oy * sh + i
                                for ox in range(ow):
                                    col = ox * sw + j
                                    for oz in range(od):
                                        out[b, ch, row, col, oz * sd + k] += \
                                            cols[b, ch, w, (oy * ow + ox) * od + oz]
