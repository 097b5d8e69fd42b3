"""Random network builders shared by the unit and acceptance tests."""

import numpy as np

from agnes.nn import (
    Conv2D,
    Flatten,
    FullyConnected,
    MaxPool2D,
    Network,
    ReLU,
)


def random_fc_net(rng, in_size=None, hidden=None, classes=None, scale=0.5):
    in_size = in_size or int(rng.randint(4, 20))
    hidden = hidden or [int(rng.randint(4, 24)) for _ in range(rng.randint(1, 3))]
    classes = classes or int(rng.randint(2, 6))
    layers = []
    prev = in_size
    for i, width in enumerate(hidden):
        w = (rng.randn(width, prev) * scale).astype(np.float32)
        b = (rng.randn(width) * scale).astype(np.float32)
        layers.append(FullyConnected(f"fc{i}", w, b))
        layers.append(ReLU(f"relu{i}"))
        prev = width
    w = (rng.randn(classes, prev) * scale).astype(np.float32)
    b = (rng.randn(classes) * scale).astype(np.float32)
    layers.append(FullyConnected("out", w, b))
    return Network((in_size,), layers, classes)


def random_conv_net(rng, max_side=12, max_convs=3, with_pool=False, classes=None):
    h = int(rng.randint(6, max_side + 1))
    w = int(rng.randint(6, max_side + 1))
    c = int(rng.randint(1, 4))
    classes = classes or int(rng.randint(2, 6))
    layers = []
    shape = (h, w, c)
    n_convs = int(rng.randint(1, max_convs + 1))
    for i in range(n_convs):
        kh = int(rng.choice([1, 3]))
        stride = int(rng.choice([1, 2])) if shape[0] > 6 else 1
        padding = int(rng.choice([0, 1])) if kh == 3 else 0
        oc = int(rng.randint(2, 5))
        oh = (shape[0] + 2 * padding - kh) // stride + 1
        ow = (shape[1] + 2 * padding - kh) // stride + 1
        if oh < 2 or ow < 2:
            break
        k = (rng.randn(oc, shape[2], kh, kh) * 0.5).astype(np.float32)
        b = (rng.randn(oc) * 0.2).astype(np.float32)
        layers.append(Conv2D(f"conv{i}", k, b, stride=stride, padding=padding))
        layers.append(ReLU(f"relu{i}"))
        shape = (oh, ow, oc)
        if with_pool and shape[0] >= 4 and i == 0:
            layers.append(MaxPool2D("pool0", 2, 2))
            shape = ((shape[0] - 2) // 2 + 1, (shape[1] - 2) // 2 + 1, shape[2])
    layers.append(Flatten("flat"))
    prev = int(np.prod(shape))
    wout = (rng.randn(classes, prev) * 0.3).astype(np.float32)
    bout = (rng.randn(classes) * 0.2).astype(np.float32)
    layers.append(FullyConnected("out", wout, bout))
    return Network((h, w, c), layers, classes)


def random_input(rng, net):
    return rng.rand(*net.input_shape).astype(np.float32)
