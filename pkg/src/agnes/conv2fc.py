"""Conversion of Conv2D layers into equivalent sparsely connected FC layers.

A convolution is a sparse linear map once inputs and outputs are flattened
row-major; keeping it sparse (CSR) keeps the converted network memory-bounded
instead of materializing the huge dense unrolled matrix.
"""

import numpy as np

from .errors import UnsupportedLayer
from .nn import DTYPE, Network, SparseFC

CONVERTIBLE_KINDS = {"fully_connected", "conv2d", "relu", "flatten", "softmax"}


def convert_conv_layer(conv, in_shape):
    """Equivalent SparseFC for a Conv2D applied to channel-last `in_shape`.

    Output flat order matches the row-major flatten of the conv output, so
    neuron addresses are preserved by the conversion. Taps falling into
    padding are dropped.
    """
    if conv.kind != "conv2d":
        raise UnsupportedLayer(conv.kind, conv.name)
    h, w, ic = in_shape
    oc, _, kh, kw = conv.kernel.shape
    stride, padding = conv.stride, conv.padding
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1

    indptr = [0]
    indices = []
    data = []
    bias = np.empty(oh * ow * oc, dtype=DTYPE)
    ic_range = np.arange(ic, dtype=np.int64)
    for oy in range(oh):
        for ox in range(ow):
            taps = []
            for dy in range(kh):
                iy = oy * stride + dy - padding
                if not 0 <= iy < h:
                    continue
                for dx in range(kw):
                    ix = ox * stride + dx - padding
                    if 0 <= ix < w:
                        taps.append((dy, dx, (iy * w + ix) * ic))
            cols = np.concatenate([base + ic_range for _, _, base in taps]) if taps else \
                np.empty(0, dtype=np.int64)
            for f in range(oc):
                row_vals = [conv.kernel[f, :, dy, dx] for dy, dx, _ in taps]
                vals = np.concatenate(row_vals) if row_vals else np.empty(0, dtype=DTYPE)
                indices.append(cols)
                data.append(vals)
                indptr.append(indptr[-1] + len(cols))
                bias[(oy * ow + ox) * oc + f] = conv.bias[f]

    # rows were generated in (oy, ox, f) blocks but flat order is
    # ((oy*ow + ox)*oc + f), which is exactly the generation order
    return SparseFC(
        conv.name,
        out_size=oh * ow * oc,
        in_size=h * w * ic,
        indptr=np.asarray(indptr, dtype=np.int64),
        indices=np.concatenate(indices) if indices else np.empty(0, np.int64),
        data=np.concatenate(data) if data else np.empty(0, DTYPE),
        bias=bias,
    )


def convert_network(net):
    """Replaces every Conv2D with its SparseFC equivalent, layer indices kept.

    Only {FC, Conv2D, ReLU, Flatten, Softmax} networks qualify; anything else
    (MaxPool, Dropout, ...) raises UnsupportedLayer so the caller can fall
    back to stimulating the original network.
    """
    for layer in net.layers:
        if layer.kind not in CONVERTIBLE_KINDS:
            raise UnsupportedLayer(layer.kind, layer.name)
    if not any(l.kind == "conv2d" for l in net.layers):
        return net
    shapes = net.layer_shapes()
    converted = []
    for i, layer in enumerate(net.layers):
        if layer.kind == "conv2d":
            in_shape = net.input_shape if i == 0 else shapes[i - 1]
            converted.append(convert_conv_layer(layer, in_shape))
        else:
            converted.append(layer)
    return Network(net.input_shape, converted, net.class_count)
