# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: direct-loop convolution, pooling and CSR matvec.

Same signatures and float32/channel-last conventions as numpy_backend.
Accumulation is float32 so both backends stay within the engine's stated
tolerance of the nested-loop reference.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

NAME = "cython"

ctypedef cnp.float32_t f32
ctypedef cnp.int64_t i64


def conv2d_forward(cnp.ndarray[f32, ndim=3] x,
                   cnp.ndarray[f32, ndim=4] kernel,
                   cnp.ndarray[f32, ndim=1] bias,
                   int stride, int padding):
    cdef int h = x.shape[0], w = x.shape[1], ic = x.shape[2]
    cdef int oc = kernel.shape[0], kh = kernel.shape[2], kw = kernel.shape[3]
    cdef int oh = (h + 2 * padding - kh) // stride + 1
    cdef int ow = (w + 2 * padding - kw) // stride + 1
    cdef cnp.ndarray[f32, ndim=3] out = np.empty((oh, ow, oc), dtype=np.float32)
    # [f, dy, dx, c] layout: the innermost channel loop walks both the
    # kernel and the input contiguously
    cdef cnp.ndarray[f32, ndim=4] kt = np.ascontiguousarray(
        kernel.transpose(0, 2, 3, 1))
    cdef int oy, ox, f, dy, dx, c, iy, ix
    cdef f32 acc
    with nogil:
        for oy in range(oh):
            for ox in range(ow):
                for f in range(oc):
                    acc = bias[f]
                    for dy in range(kh):
                        iy = oy * stride + dy - padding
                        if iy < 0 or iy >= h:
                            continue
                        for dx in range(kw):
                            ix = ox * stride + dx - padding
                            if ix < 0 or ix >= w:
                                continue
                            for c in range(ic):
                                acc += kt[f, dy, dx, c] * x[iy, ix, c]
                    out[oy, ox, f] = acc
    return out


def conv2d_input_grad(cnp.ndarray[f32, ndim=3] grad_out,
                      cnp.ndarray[f32, ndim=4] kernel,
                      int stride, int padding, int in_h, int in_w):
    cdef int oc = kernel.shape[0], ic = kernel.shape[1]
    cdef int kh = kernel.shape[2], kw = kernel.shape[3]
    cdef int oh = grad_out.shape[0], ow = grad_out.shape[1]
    cdef cnp.ndarray[f32, ndim=3] gin = np.zeros((in_h, in_w, ic), dtype=np.float32)
    cdef cnp.ndarray[f32, ndim=4] kt = np.ascontiguousarray(
        kernel.transpose(0, 2, 3, 1))
    cdef int oy, ox, f, dy, dx, c, iy, ix
    cdef f32 g
    with nogil:
        for oy in range(oh):
            for ox in range(ow):
                for f in range(oc):
                    g = grad_out[oy, ox, f]
                    if g == 0.0:
                        continue
                    for dy in range(kh):
                        iy = oy * stride + dy - padding
                        if iy < 0 or iy >= in_h:
                            continue
                        for dx in range(kw):
                            ix = ox * stride + dx - padding
                            if ix < 0 or ix >= in_w:
                                continue
                            for c in range(ic):
                                gin[iy, ix, c] += kt[f, dy, dx, c] * g
    return gin


def maxpool_forward(cnp.ndarray[f32, ndim=3] x, int window, int stride):
    cdef int h = x.shape[0], w = x.shape[1], c = x.shape[2]
    cdef int oh = (h - window) // stride + 1
    cdef int ow = (w - window) // stride + 1
    cdef cnp.ndarray[f32, ndim=3] out = np.empty((oh, ow, c), dtype=np.float32)
    cdef cnp.ndarray[i64, ndim=3] arg = np.empty((oh, ow, c), dtype=np.int64)
    cdef int oy, ox, ch, dy, dx, iy, ix
    cdef f32 best, v
    cdef i64 besti
    with nogil:
        for oy in range(oh):
            for ox in range(ow):
                for ch in range(c):
                    best = x[oy * stride, ox * stride, ch]
                    besti = (<i64>(oy * stride) * w + ox * stride) * c + ch
                    for dy in range(window):
                        iy = oy * stride + dy
                        for dx in range(window):
                            ix = ox * stride + dx
                            v = x[iy, ix, ch]
                            # strict > keeps the lowest flat index on ties
                            if v > best:
                                best = v
                                besti = (<i64>iy * w + ix) * c + ch
                    out[oy, ox, ch] = best
                    arg[oy, ox, ch] = besti
    return out, arg


def maxpool_input_grad(cnp.ndarray[f32, ndim=3] grad_out,
                       cnp.ndarray[i64, ndim=3] argmax, in_shape):
    cdef cnp.ndarray[f32, ndim=1] gin = np.zeros(
        in_shape[0] * in_shape[1] * in_shape[2], dtype=np.float32)
    cdef cnp.ndarray[f32, ndim=1] g = grad_out.reshape(-1)
    cdef cnp.ndarray[i64, ndim=1] a = argmax.reshape(-1)
    cdef Py_ssize_t i
    with nogil:
        for i in range(g.shape[0]):
            gin[a[i]] += g[i]
    return gin.reshape(in_shape)


def sparse_matvec(cnp.ndarray[i64, ndim=1] indptr,
                  cnp.ndarray[i64, ndim=1] indices,
                  cnp.ndarray[f32, ndim=1] data,
                  cnp.ndarray[f32, ndim=1] bias,
                  cnp.ndarray[f32, ndim=1] x):
    cdef Py_ssize_t rows = indptr.shape[0] - 1
    cdef cnp.ndarray[f32, ndim=1] out = np.empty(rows, dtype=np.float32)
    cdef Py_ssize_t r, j
    cdef f32 acc
    with nogil:
        for r in range(rows):
            acc = bias[r]
            for j in range(indptr[r], indptr[r + 1]):
                acc += data[j] * x[indices[j]]
            out[r] = acc
    return out


def sparse_matvec_t(cnp.ndarray[i64, ndim=1] indptr,
                    cnp.ndarray[i64, ndim=1] indices,
                    cnp.ndarray[f32, ndim=1] data,
                    cnp.ndarray[f32, ndim=1] g, int in_size):
    cdef Py_ssize_t rows = indptr.shape[0] - 1
    cdef cnp.ndarray[f32, ndim=1] gin = np.zeros(in_size, dtype=np.float32)
    cdef Py_ssize_t r, j
    cdef f32 gr
    with nogil:
        for r in range(rows):
            gr = g[r]
            if gr == 0.0:
                continue
            for j in range(indptr[r], indptr[r + 1]):
                gin[indices[j]] += data[j] * gr
    return gin
