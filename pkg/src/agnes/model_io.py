"""Model and dataset files.

Model: a JSON manifest (format "agnes-model/1") plus a sidecar blob of
little-endian float32 weights, referenced by per-layer byte windows. Dataset:
a binary file, magic "AGND", u32 count/h/w/c, u8 pixels (row-major,
channel-last), u8 labels. Pixels scale to [0,1] on load.

Both formats are the interchange contract with the fixture trainer; layouts
must stay bit-stable.
"""

import json
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .errors import (
    BlobOverrun,
    IoError,
    ParseError,
    VersionMismatch,
)
from .nn import (
    Conv2D,
    Dropout,
    Flatten,
    FullyConnected,
    MaxPool2D,
    Network,
    ReLU,
    Softmax,
    infer_shapes,
)

MODEL_FORMAT = "agnes-model/1"
DATASET_MAGIC = b"AGND"

_F32 = np.dtype("<f4")


def atomic_write(path, payload):
    d = os.path.dirname(os.path.abspath(path))
    try:
        fd, tmp = tempfile.mkstemp(dir=d, prefix=".agnes-tmp-")
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def _blob_name(path):
    stem, ext = os.path.splitext(path)
    return (stem if ext == ".json" else path) + ".bin"


def _window(entry, field, blob_len, expected_count, layer):
    try:
        offset = int(entry[field]["offset"])
        length = int(entry[field]["length"])
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"layer {layer!r}: bad window for {field}") from e
    if length != 4 * expected_count:
        raise ParseError(
            f"layer {layer!r}: window {field} holds {length} bytes, "
            f"expected {4 * expected_count}")
    if offset < 0 or offset + length > blob_len:
        raise BlobOverrun(f"layer {layer!r}: window {field} [{offset},{offset + length}) "
                          f"outside blob of {blob_len} bytes")
    return offset, length


def _read_f32(blob, offset, length, shape):
    arr = np.frombuffer(blob, dtype=_F32, count=length // 4, offset=offset)
    return arr.astype(np.float32).reshape(shape)


def load_model(path):
    """Loads a manifest+blob pair into a validated Network."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: invalid JSON: {e}") from e
    if not isinstance(manifest, dict) or manifest.get("format") != MODEL_FORMAT:
        raise VersionMismatch(
            f"{path}: expected format {MODEL_FORMAT!r}, got {manifest.get('format')!r}")
    blob_path = os.path.join(os.path.dirname(os.path.abspath(path)),
                             manifest.get("weights_file", ""))
    try:
        with open(blob_path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise IoError(f"cannot read weights blob {blob_path}: {e}") from e

    try:
        input_shape = tuple(int(d) for d in manifest["input_shape"])
        class_count = int(manifest["class_count"])
        entries = manifest["layers"]
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"{path}: malformed manifest: {e}") from e
    if not isinstance(entries, list) or not entries:
        raise ParseError(f"{path}: manifest declares no layers")

    layers = []
    windows = []
    for entry in entries:
        try:
            kind = entry["kind"]
            name = entry["name"]
        except (KeyError, TypeError) as e:
            raise ParseError(f"{path}: layer entry missing kind/name") from e
        try:
            if kind == "fully_connected":
                out_size, in_size = int(entry["out"]), int(entry["in"])
                wo, wl = _window(entry, "weight", len(blob), out_size * in_size, name)
                bo, bl = _window(entry, "bias", len(blob), out_size, name)
                windows += [(wo, wl), (bo, bl)]
                layers.append(FullyConnected(
                    name, _read_f32(blob, wo, wl, (out_size, in_size)),
                    _read_f32(blob, bo, bl, (out_size,))))
            elif kind == "conv2d":
                oc, ic = int(entry["out_channels"]), int(entry["in_channels"])
                kh, kw = int(entry["kernel_h"]), int(entry["kernel_w"])
                ko, kl = _window(entry, "kernel", len(blob), oc * ic * kh * kw, name)
                bo, bl = _window(entry, "bias", len(blob), oc, name)
                windows += [(ko, kl), (bo, bl)]
                layers.append(Conv2D(
                    name, _read_f32(blob, ko, kl, (oc, ic, kh, kw)),
                    _read_f32(blob, bo, bl, (oc,)),
                    stride=int(entry["stride"]), padding=int(entry["padding"])))
            elif kind == "relu":
                layers.append(ReLU(name))
            elif kind == "maxpool2d":
                layers.append(MaxPool2D(name, int(entry["window"]), int(entry["stride"])))
            elif kind == "flatten":
                layers.append(Flatten(name))
            elif kind == "dropout":
                layers.append(Dropout(name, float(entry["rate"])))
            elif kind == "softmax":
                layers.append(Softmax(name))
            else:
                raise ParseError(f"{path}: unknown layer kind {kind!r} in {name!r}")
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(f"{path}: malformed layer {name!r}: {e}") from e

    windows.sort()
    for (o1, l1), (o2, _) in zip(windows, windows[1:]):
        if o1 + l1 > o2:
            raise BlobOverrun(f"{path}: overlapping weight windows at offset {o2}")

    net = Network(input_shape, layers, class_count)
    infer_shapes(net)
    for layer in layers:
        for arr in (getattr(layer, "weight", None), getattr(layer, "kernel", None),
                    getattr(layer, "bias", None)):
            if arr is not None and not np.isfinite(arr).all():
                raise ParseError(f"{path}: non-finite weights in layer {layer.name!r}")
    return net


def save_model(net, path):
    """Writes manifest+blob; overwrites atomically (temp file + rename)."""
    chunks = []
    offset = 0

    def window(arr):
        nonlocal offset
        raw = np.ascontiguousarray(arr, dtype=_F32).tobytes()
        w = {"offset": offset, "length": len(raw)}
        chunks.append(raw)
        offset += len(raw)
        return w

    entries = []
    for layer in net.layers:
        e = {"name": layer.name, "kind": layer.kind}
        if layer.kind == "fully_connected":
            e["out"], e["in"] = layer.out_size, layer.in_size
            e["weight"] = window(layer.weight)
            e["bias"] = window(layer.bias)
        elif layer.kind == "conv2d":
            oc, ic, kh, kw = layer.kernel.shape
            e.update(out_channels=oc, in_channels=ic, kernel_h=kh, kernel_w=kw,
                     stride=layer.stride, padding=layer.padding)
            e["kernel"] = window(layer.kernel)
            e["bias"] = window(layer.bias)
        elif layer.kind == "maxpool2d":
            e.update(window=layer.window, stride=layer.stride)
        elif layer.kind == "dropout":
            e["rate"] = layer.rate
        elif layer.kind in ("relu", "flatten", "softmax"):
            pass
        else:
            from .errors import UnsupportedLayer

            raise UnsupportedLayer(layer.kind, layer.name)
        entries.append(e)

    blob_path = _blob_name(path)
    manifest = {
        "format": MODEL_FORMAT,
        "input_shape": list(net.input_shape),
        "class_count": net.class_count,
        "weights_file": os.path.basename(blob_path),
        "layers": entries,
    }
    atomic_write(blob_path, b"".join(chunks))
    atomic_write(path, json.dumps(manifest, indent=1).encode("utf-8"))


@dataclass
class Dataset:
    images: np.ndarray  # [n, h, w, c] float32 in [0,1]
    labels: np.ndarray  # [n] int64

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])


def load_dataset(path):
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    if len(raw) < 20 or raw[:4] != DATASET_MAGIC:
        raise ParseError(f"{path}: not a dataset file (bad magic)")
    count, h, w, c = struct.unpack_from("<4I", raw, 4)
    pixel_bytes = count * h * w * c
    if len(raw) != 20 + pixel_bytes + count:
        raise ParseError(f"{path}: size mismatch: have {len(raw)} bytes, "
                         f"need {20 + pixel_bytes + count}")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=pixel_bytes, offset=20)
    labels = np.frombuffer(raw, dtype=np.uint8, count=count, offset=20 + pixel_bytes)
    images = (pixels.reshape(count, h, w, c).astype(np.float32) / np.float32(255.0)
              if count else np.zeros((0, h, w, c), np.float32))
    return Dataset(images=images, labels=labels.astype(np.int64))


def save_dataset(path, pixels_u8, labels):
    """pixels_u8: [n,h,w,c] uint8; labels: [n] ints < 256."""
    pixels_u8 = np.ascontiguousarray(pixels_u8, dtype=np.uint8)
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    n, h, w, c = pixels_u8.shape
    header = DATASET_MAGIC + struct.pack("<4I", n, h, w, c)
    atomic_write(path, header + pixels_u8.tobytes() + labels.tobytes())


def quantize_images(images):
    """Float [0,1] images to the u8 pixel encoding (round-to-nearest)."""
    return np.clip(np.rint(np.asarray(images) * 255.0), 0, 255).astype(np.uint8)
