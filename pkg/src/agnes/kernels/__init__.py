"""Hot-kernel backend selection.

Two interchangeable backends implement the convolution, pooling and sparse
matvec inner loops: a compiled Cython extension (_ckernels) and a pure-numpy
fallback. The compiled one is picked at import when available. Set
AGNES_KERNELS=numpy or AGNES_KERNELS=cython to force a backend (cython raises
if the extension was not built). benchmarks/bench_kernels.py compares the two.

Per benchmarks/bench_kernels.py, the compiled loops win on pooling (~5x) and
CSR matvec (~2-3x) while BLAS-backed im2col beats naive loops on convolution,
so the cython backend keeps the numpy convolution. _ckernels still exports
its own conv for the benchmark comparison.
"""

import os

from . import numpy_backend

_choice = os.environ.get("AGNES_KERNELS", "auto").lower()

_ext = None
if _choice in ("auto", "cython"):
    try:
        from . import _ckernels as _ext
    except ImportError:
        if _choice == "cython":
            raise

if _choice == "numpy" or _ext is None:
    BACKEND_NAME = "numpy"
    conv2d_forward = numpy_backend.conv2d_forward
    conv2d_input_grad = numpy_backend.conv2d_input_grad
    maxpool_forward = numpy_backend.maxpool_forward
    maxpool_input_grad = numpy_backend.maxpool_input_grad
    sparse_matvec = numpy_backend.sparse_matvec
    sparse_matvec_t = numpy_backend.sparse_matvec_t
elif _choice in ("auto", "cython"):
    BACKEND_NAME = "cython"
    conv2d_forward = numpy_backend.conv2d_forward
    conv2d_input_grad = numpy_backend.conv2d_input_grad
    maxpool_forward = _ext.maxpool_forward
    maxpool_input_grad = _ext.maxpool_input_grad
    sparse_matvec = _ext.sparse_matvec
    sparse_matvec_t = _ext.sparse_matvec_t
else:
    raise ValueError(f"AGNES_KERNELS must be auto, cython or numpy, got {_choice!r}")
