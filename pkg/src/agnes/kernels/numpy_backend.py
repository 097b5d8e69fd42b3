"""Pure-numpy implementations of the hot kernels.

All arrays are float32, channel-last ([h, w, c]) with row-major flattening.
The compiled backend in _ckernels.pyx implements the same signatures; either
backend may be active, see agnes.kernels.__init__.
"""

import numpy as np
import scipy.sparse as sp

NAME = "numpy"

DTYPE = np.float32


def conv2d_forward(x, kernel, bias, stride, padding):
    """im2col convolution. x: [h,w,ic], kernel: [oc,ic,kh,kw] -> [oh,ow,oc]."""
    h, w, ic = x.shape
    oc, kic, kh, kw = kernel.shape
    if padding:
        xp = np.zeros((h + 2 * padding, w + 2 * padding, ic), dtype=DTYPE)
        xp[padding : padding + h, padding : padding + w, :] = x
    else:
        xp = x
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    # Patch columns ordered (dy, dx, ic) to match the kernel reshape below.
    cols = np.empty((oh, ow, kh, kw, ic), dtype=DTYPE)
    for dy in range(kh):
        for dx in range(kw):
            cols[:, :, dy, dx, :] = xp[
                dy : dy + oh * stride : stride, dx : dx + ow * stride : stride, :
            ]
    kmat = kernel.transpose(2, 3, 1, 0).reshape(kh * kw * ic, oc)
    out = cols.reshape(oh * ow, kh * kw * ic) @ kmat
    out += bias
    return out.reshape(oh, ow, oc)


def conv2d_input_grad(grad_out, kernel, stride, padding, in_h, in_w):
    """Gradient of conv2d_forward w.r.t. its input. grad_out: [oh,ow,oc]."""
    oc, ic, kh, kw = kernel.shape
    oh, ow, _ = grad_out.shape
    kmat = kernel.transpose(2, 3, 1, 0).reshape(kh * kw * ic, oc)
    gcols = grad_out.reshape(oh * ow, oc) @ kmat.T
    gcols = gcols.reshape(oh, ow, kh, kw, ic)
    gxp = np.zeros((in_h + 2 * padding, in_w + 2 * padding, ic), dtype=DTYPE)
    for dy in range(kh):
        for dx in range(kw):
            gxp[dy : dy + oh * stride : stride, dx : dx + ow * stride : stride, :] += gcols[
                :, :, dy, dx, :
            ]
    if padding:
        return gxp[padding : padding + in_h, padding : padding + in_w, :]
    return gxp


def maxpool_forward(x, window, stride):
    """Max pooling. Returns (out [oh,ow,c], argmax flat input indices [oh,ow,c]).

    Ties go to the lowest flat input index: window offsets are scanned in
    (dy, dx) order and argmax keeps the first maximum.
    """
    h, w, c = x.shape
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    vals = np.empty((window * window, oh, ow, c), dtype=DTYPE)
    for dy in range(window):
        for dx in range(window):
            vals[dy * window + dx] = x[
                dy : dy + oh * stride : stride, dx : dx + ow * stride : stride, :
            ]
    sel = np.argmax(vals, axis=0)
    out = np.take_along_axis(vals, sel[None], axis=0)[0]
    dy = sel // window
    dx = sel % window
    oy = np.arange(oh)[:, None, None]
    ox = np.arange(ow)[None, :, None]
    ch = np.arange(c)[None, None, :]
    argmax = ((oy * stride + dy) * w + (ox * stride + dx)) * c + ch
    return out, argmax.astype(np.int64)


def maxpool_input_grad(grad_out, argmax, in_shape):
    gin = np.zeros(int(np.prod(in_shape)), dtype=DTYPE)
    np.add.at(gin, argmax.ravel(), grad_out.ravel())
    return gin.reshape(in_shape)


def _as_csr(indptr, indices, data, out_size, in_size):
    return sp.csr_matrix((data, indices, indptr), shape=(out_size, in_size), copy=False)


def sparse_matvec(indptr, indices, data, bias, x):
    """CSR matrix-vector product with bias: y = A @ x + b."""
    a = _as_csr(indptr, indices, data, len(indptr) - 1, len(x))
    return (a @ x + bias).astype(DTYPE, copy=False)


def sparse_matvec_t(indptr, indices, data, g, in_size):
    """Transpose product: returns A.T @ g for the CSR matrix A."""
    a = _as_csr(indptr, indices, data, len(indptr) - 1, in_size)
    return (a.T @ g).astype(DTYPE, copy=False)
