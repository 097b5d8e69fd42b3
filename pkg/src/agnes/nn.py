"""Minimal float32 inference and input-gradient engine.

Layer vocabulary: FullyConnected, SparseFC (conv-equivalent), Conv2D, ReLU,
MaxPool2D, Flatten, Dropout (identity at inference), Softmax. Tensors are
numpy float32 arrays, channel-last, flattened row-major everywhere.

Networks and their parameters are immutable after construction; forward,
forward_from and input_gradient are pure functions and safe to call from
multiple threads over a shared Network.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import EmptyDataset, IndexOutOfRange, ShapeMismatch

DTYPE = np.float32


def _frozen(arr):
    arr = np.ascontiguousarray(arr, dtype=DTYPE)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, order=True)
class NeuronAddress:
    """A neuron, as (engine layer index, flat index into that layer's output)."""

    layer_index: int
    flat_index: int


class Layer:
    kind = "?"

    def __init__(self, name):
        self.name = name

    def output_shape(self, in_shape):
        raise NotImplementedError

    def forward(self, x):
        """Returns (output, cache); cache feeds input_grad."""
        raise NotImplementedError

    def input_grad(self, grad_out, cache):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r})"


class FullyConnected(Layer):
    kind = "fully_connected"

    def __init__(self, name, weight, bias):
        super().__init__(name)
        self.weight = _frozen(weight)
        self.bias = _frozen(bias)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeMismatch(name, "weight [out,in] with bias [out]",
                                (self.weight.shape, self.bias.shape))
        self.out_size, self.in_size = self.weight.shape

    def output_shape(self, in_shape):
        # Any shape with the right element count is accepted; the layer
        # flattens row-major, so Flatten before an FC stays a no-op.
        if int(np.prod(in_shape)) != self.in_size:
            raise ShapeMismatch(self.name, f"input with {self.in_size} elements", in_shape)
        return (self.out_size,)

    def forward(self, x):
        flat = x.reshape(-1)
        return self.weight @ flat + self.bias, x.shape

    def input_grad(self, grad_out, cache):
        return (self.weight.T @ grad_out).reshape(cache)


class SparseFC(Layer):
    """Sparsely connected FC layer in CSR form (the conv-equivalent form)."""

    kind = "sparse_fc"

    def __init__(self, name, out_size, in_size, indptr, indices, data, bias):
        super().__init__(name)
        self.out_size = int(out_size)
        self.in_size = int(in_size)
        self.indptr = np.ascontiguousarray(indptr, dtype=np.int64)
        self.indices = np.ascontiguousarray(indices, dtype=np.int64)
        self.data = _frozen(data)
        self.bias = _frozen(bias)
        self.indptr.setflags(write=False)
        self.indices.setflags(write=False)

    def output_shape(self, in_shape):
        if int(np.prod(in_shape)) != self.in_size:
            raise ShapeMismatch(self.name, f"input with {self.in_size} elements", in_shape)
        return (self.out_size,)

    def forward(self, x):
        flat = np.ascontiguousarray(x.reshape(-1))
        return kernels.sparse_matvec(self.indptr, self.indices, self.data, self.bias, flat), x.shape

    def input_grad(self, grad_out, cache):
        g = np.ascontiguousarray(grad_out, dtype=DTYPE)
        return kernels.sparse_matvec_t(self.indptr, self.indices, self.data, g,
                                       self.in_size).reshape(cache)

    def dense_row(self, r):
        lo, hi = self.indptr[r], self.indptr[r + 1]
        row = np.zeros(self.in_size, dtype=DTYPE)
        row[self.indices[lo:hi]] = self.data[lo:hi]
        return row


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, name, kernel, bias, stride=1, padding=0):
        super().__init__(name)
        self.kernel = _frozen(kernel)  # [out_ch, in_ch, kh, kw]
        self.bias = _frozen(bias)
        if self.kernel.ndim != 4 or self.bias.shape != (self.kernel.shape[0],):
            raise ShapeMismatch(name, "kernel [oc,ic,kh,kw] with bias [oc]",
                                (self.kernel.shape, self.bias.shape))
        if stride < 1 or padding < 0:
            raise ShapeMismatch(name, "stride >= 1 and padding >= 0", (stride, padding))
        self.stride = int(stride)
        self.padding = int(padding)

    def output_shape(self, in_shape):
        oc, ic, kh, kw = self.kernel.shape
        if len(in_shape) != 3 or in_shape[2] != ic:
            raise ShapeMismatch(self.name, f"[h,w,{ic}]", in_shape)
        h, w, _ = in_shape
        oh = (h + 2 * self.padding - kh) // self.stride + 1
        ow = (w + 2 * self.padding - kw) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeMismatch(self.name, "kernel no larger than padded input", in_shape)
        return (oh, ow, oc)

    def forward(self, x):
        x = np.ascontiguousarray(x)
        out = kernels.conv2d_forward(x, self.kernel, self.bias, self.stride, self.padding)
        return out, x.shape

    def input_grad(self, grad_out, cache):
        g = np.ascontiguousarray(grad_out, dtype=DTYPE)
        return kernels.conv2d_input_grad(g, self.kernel, self.stride, self.padding,
                                         cache[0], cache[1])


class ReLU(Layer):
    kind = "relu"

    def __init__(self, name):
        super().__init__(name)

    def output_shape(self, in_shape):
        return in_shape

    def forward(self, x):
        # derivative at exactly 0 is 0: the mask is strict
        return np.maximum(x, 0), x > 0

    def input_grad(self, grad_out, cache):
        return grad_out * cache


class MaxPool2D(Layer):
    kind = "maxpool2d"

    def __init__(self, name, window, stride=None):
        super().__init__(name)
        self.window = int(window)
        self.stride = int(stride) if stride is not None else self.window
        if self.window < 1 or self.stride < 1:
            raise ShapeMismatch(name, "window and stride >= 1", (window, stride))

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeMismatch(self.name, "[h,w,c]", in_shape)
        h, w, c = in_shape
        oh = (h - self.window) // self.stride + 1
        ow = (w - self.window) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeMismatch(self.name, "window no larger than input", in_shape)
        return (oh, ow, c)

    def forward(self, x):
        x = np.ascontiguousarray(x)
        out, argmax = kernels.maxpool_forward(x, self.window, self.stride)
        return out, (argmax, x.shape)

    def input_grad(self, grad_out, cache):
        argmax, in_shape = cache
        g = np.ascontiguousarray(grad_out, dtype=DTYPE)
        return kernels.maxpool_input_grad(g, argmax, in_shape)


class Flatten(Layer):
    kind = "flatten"

    def __init__(self, name):
        super().__init__(name)

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        return x.reshape(-1), x.shape

    def input_grad(self, grad_out, cache):
        return grad_out.reshape(cache)


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, name, rate):
        super().__init__(name)
        if not 0 <= rate < 1:
            raise ShapeMismatch(name, "rate in [0,1)", rate)
        self.rate = float(rate)

    def output_shape(self, in_shape):
        return in_shape

    def forward(self, x):
        return x, None  # identity at inference

    def input_grad(self, grad_out, cache):
        return grad_out


class Softmax(Layer):
    kind = "softmax"

    def __init__(self, name):
        super().__init__(name)

    def output_shape(self, in_shape):
        return in_shape

    def forward(self, x):
        e = np.exp(x - np.max(x))
        s = (e / e.sum()).astype(DTYPE)
        return s, s

    def input_grad(self, grad_out, cache):
        s = cache
        return (s * (grad_out - np.dot(grad_out, s))).astype(DTYPE)


PARAM_KINDS = ("fully_connected", "sparse_fc", "conv2d")


class Network:
    """Ordered layer stack. Construction does not validate; infer_shapes does."""

    def __init__(self, input_shape, layers, class_count):
        self.input_shape = tuple(int(d) for d in input_shape)
        self.layers = tuple(layers)
        self.class_count = int(class_count)
        self._shapes = None

    def layer_shapes(self):
        if self._shapes is None:
            self._shapes = infer_shapes(self)
        return self._shapes

    def __repr__(self):
        kinds = ",".join(l.kind for l in self.layers)
        return f"Network(input={self.input_shape}, layers=[{kinds}], classes={self.class_count})"


def infer_shapes(net):
    """Per-layer output shapes; raises ShapeMismatch on inconsistent wiring."""
    names = [l.name for l in net.layers]
    if len(set(names)) != len(names):
        dup = sorted({n for n in names if names.count(n) > 1})
        raise ShapeMismatch(dup[0], "unique layer names", "duplicate")
    shapes = []
    cur = net.input_shape
    for layer in net.layers:
        cur = layer.output_shape(cur)
        shapes.append(cur)
    if not shapes or int(np.prod(shapes[-1])) != net.class_count:
        raise ShapeMismatch("<output>", (net.class_count,), shapes[-1] if shapes else None)
    return shapes


@dataclass
class ForwardTrace:
    logits: np.ndarray
    activations: list = field(repr=False)
    caches: list = field(repr=False)


def forward(net, x):
    """Full forward pass; activations[i] is the output of layer i."""
    x = np.asarray(x, dtype=DTYPE)
    if tuple(x.shape) != net.input_shape:
        raise ShapeMismatch("<input>", net.input_shape, tuple(x.shape))
    net.layer_shapes()
    activations, caches = [], []
    cur = x
    for layer in net.layers:
        cur, cache = layer.forward(cur)
        activations.append(cur)
        caches.append(cache)
    return ForwardTrace(logits=cur.reshape(-1), activations=activations, caches=caches)


def forward_from(net, layer_index, injected):
    """Propagates `injected` (the output of layer_index) through the tail."""
    shapes = net.layer_shapes()
    if not 0 <= layer_index < len(net.layers):
        raise IndexOutOfRange(f"layer index {layer_index} outside 0..{len(net.layers) - 1}")
    injected = np.asarray(injected, dtype=DTYPE)
    if tuple(injected.shape) != shapes[layer_index]:
        raise ShapeMismatch(net.layers[layer_index].name, shapes[layer_index],
                            tuple(injected.shape))
    cur = injected
    for layer in net.layers[layer_index + 1 :]:
        cur, _ = layer.forward(cur)
    return cur.reshape(-1)


@dataclass
class LinearObjective:
    """Scalar objective linear in the logits and in named activations."""

    logit_coeffs: dict = field(default_factory=dict)       # class index -> coeff
    activation_coeffs: dict = field(default_factory=dict)  # NeuronAddress -> coeff

    def value(self, logits, activations):
        v = sum(c * float(logits[k]) for k, c in self.logit_coeffs.items())
        v += sum(c * float(activations[a.layer_index].reshape(-1)[a.flat_index])
                 for a, c in self.activation_coeffs.items())
        return v


def input_gradient_from_trace(net, trace, objective):
    """d(objective)/d(input) by one reverse pass over an existing trace."""
    n = len(net.layers)
    inject = [None] * n
    for addr, coeff in objective.activation_coeffs.items():
        g = inject[addr.layer_index]
        if g is None:
            g = np.zeros(trace.activations[addr.layer_index].size, dtype=DTYPE)
            inject[addr.layer_index] = g
        g[addr.flat_index] += coeff
    grad = np.zeros(net.class_count, dtype=DTYPE)
    for k, coeff in objective.logit_coeffs.items():
        grad[k] += coeff
    grad = grad.reshape(trace.activations[-1].shape)
    if inject[n - 1] is not None:
        grad = grad + inject[n - 1].reshape(grad.shape)
    for i in range(n - 1, -1, -1):
        grad = net.layers[i].input_grad(grad, trace.caches[i])
        if i > 0 and inject[i - 1] is not None:
            grad = grad + inject[i - 1].reshape(grad.shape)
    return grad.astype(DTYPE)


def backward_input_grad(net, x, objective):
    """d(objective)/dx for a LinearObjective. ReLU subgradient at 0 is 0;
    MaxPool routes gradient to the argmax, ties to the lowest flat index."""
    trace = forward(net, x)
    return input_gradient_from_trace(net, trace, objective)


def predict(net, x):
    """Argmax over raw logits; ties break to the lowest class index."""
    return int(np.argmax(forward(net, x).logits))


def accuracy(net, images, labels):
    if len(images) == 0:
        raise EmptyDataset("accuracy over an empty dataset")
    hits = sum(predict(net, img) == int(lbl) for img, lbl in zip(images, labels))
    return hits / len(images)


@dataclass(frozen=True)
class Site:
    """A hidden stimulation/clustering site: the post-activation output of a
    parametrized layer (its following ReLU when present)."""

    site_index: int
    param_index: int
    shape: tuple
    width: int


def hidden_sites(net):
    shapes = net.layer_shapes()
    param_idx = [i for i, l in enumerate(net.layers) if l.kind in PARAM_KINDS]
    sites = []
    for i in param_idx[:-1]:  # final classifier layer is not a site
        site = i + 1 if i + 1 < len(net.layers) and net.layers[i + 1].kind == "relu" else i
        sites.append(Site(site_index=site, param_index=i, shape=shapes[site],
                          width=int(np.prod(shapes[site]))))
    return sites
