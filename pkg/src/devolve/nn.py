"""Minimal deterministic float64 network engine.

Supports dense and small convolutional classifiers: forward pass, exact
analytic gradients, plain SGD with an optional sparsity mask, and a versioned
binary serialization format ("DEVN"). Everything is seeded and bit-reproducible;
networks are treated as immutable values during evaluation (updates return new
networks).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

MAGIC = b"DEVN"
FORMAT_VERSION = 1

LOSS_KINDS = ("mse", "cross_entropy")


class ShapeError(ValueError):
    """Raised when tensor shapes do not compose through the network."""


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class Layer:
    """Base layer. Subclasses implement apply/grads as pure functions.

    `apply` returns (output, ctx); `grads(ctx, grad_out)` returns
    (grad_input, [grad per parameter tensor]). The ctx is local to the call so
    the same layer object can be evaluated concurrently.
    """

    kind = "base"

    def param_tensors(self) -> list[np.ndarray]:
        return []

    def param_names(self) -> list[str]:
        return []

    def with_params(self, tensors: Sequence[np.ndarray]) -> "Layer":
        if tensors:
            raise ValueError(f"{self.kind} takes no parameters")
        return self

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        raise NotImplementedError

    def apply(self, x: np.ndarray):
        raise NotImplementedError

    def grads(self, ctx, grad_out: np.ndarray):
        raise NotImplementedError

    def hyper(self) -> dict:
        return {}


class Dense(Layer):
    kind = "dense"

    def __init__(self, weights: np.ndarray, bias: np.ndarray):
        weights = np.asarray(weights, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if weights.ndim != 2 or bias.shape != (weights.shape[1],):
            raise ShapeError(
                f"dense expects weights [in,out] and bias [out], "
                f"got {weights.shape} and {bias.shape}"
            )
        self.weights = weights
        self.bias = bias

    def param_tensors(self):
        return [self.weights, self.bias]

    def param_names(self):
        return ["weights", "bias"]

    def with_params(self, tensors):
        w, b = tensors
        return Dense(w, b)

    def out_shape(self, in_shape):
        if len(in_shape) != 1 or in_shape[0] != self.weights.shape[0]:
            raise ShapeError(
                f"dense layer expects flat input of width {self.weights.shape[0]}, "
                f"got shape {in_shape}"
            )
        return (self.weights.shape[1],)

    def apply(self, x):
        return x @ self.weights + self.bias, x

    def grads(self, ctx, grad_out):
        x = ctx
        gw = x.T @ grad_out
        gb = grad_out.sum(axis=0)
        return grad_out @ self.weights.T, [gw, gb]


class Conv2D(Layer):
    """2-D convolution, NHWC layout, kernel [kh, kw, cin, cout]."""

    kind = "conv2d"

    def __init__(self, kernel: np.ndarray, bias: np.ndarray, stride: int = 1,
                 padding: str = "same"):
        kernel = np.asarray(kernel, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if kernel.ndim != 4 or bias.shape != (kernel.shape[3],):
            raise ShapeError(
                f"conv2d expects kernel [kh,kw,cin,cout] and bias [cout], "
                f"got {kernel.shape} and {bias.shape}"
            )
        if stride < 1:
            raise ValueError("stride must be >= 1")
        if padding not in ("same", "valid"):
            raise ValueError(f"unknown padding {padding!r}")
        self.kernel = kernel
        self.bias = bias
        self.stride = int(stride)
        self.padding = padding

    def param_tensors(self):
        return [self.kernel, self.bias]

    def param_names(self):
        return ["weights", "bias"]

    def with_params(self, tensors):
        k, b = tensors
        return Conv2D(k, b, self.stride, self.padding)

    def hyper(self):
        return {"stride": self.stride, "padding": self.padding}

    def _geometry(self, h, w):
        kh, kw = self.kernel.shape[:2]
        s = self.stride
        if self.padding == "same":
            oh = -(-h // s)
            ow = -(-w // s)
            ph = max((oh - 1) * s + kh - h, 0)
            pw = max((ow - 1) * s + kw - w, 0)
        else:
            if h < kh or w < kw:
                raise ShapeError(f"conv2d input {h}x{w} smaller than kernel {kh}x{kw}")
            oh = (h - kh) // s + 1
            ow = (w - kw) // s + 1
            ph = pw = 0
        return oh, ow, ph, pw

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[2] != self.kernel.shape[2]:
            raise ShapeError(
                f"conv2d expects input [h,w,{self.kernel.shape[2]}], got shape {in_shape}"
            )
        oh, ow, _, _ = self._geometry(in_shape[0], in_shape[1])
        return (oh, ow, self.kernel.shape[3])

    def apply(self, x):
        n, h, w, _ = x.shape
        kh, kw = self.kernel.shape[:2]
        s = self.stride
        oh, ow, ph, pw = self._geometry(h, w)
        xp = np.pad(x, ((0, 0), (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2), (0, 0)))
        y = np.broadcast_to(self.bias, (n, oh, ow, self.kernel.shape[3])).copy()
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, i:i + s * (oh - 1) + 1:s, j:j + s * (ow - 1) + 1:s, :]
                y += patch @ self.kernel[i, j]
        return y, (xp, (n, h, w), (oh, ow, ph, pw))

    def grads(self, ctx, grad_out):
        xp, (n, h, w), (oh, ow, ph, pw) = ctx
        kh, kw = self.kernel.shape[:2]
        s = self.stride
        gk = np.zeros_like(self.kernel)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, i:i + s * (oh - 1) + 1:s, j:j + s * (ow - 1) + 1:s, :]
                gk[i, j] = np.tensordot(patch, grad_out, axes=([0, 1, 2], [0, 1, 2]))
                gxp[:, i:i + s * (oh - 1) + 1:s, j:j + s * (ow - 1) + 1:s, :] += (
                    grad_out @ self.kernel[i, j].T
                )
        gb = grad_out.sum(axis=(0, 1, 2))
        gx = gxp[:, ph // 2:ph // 2 + h, pw // 2:pw // 2 + w, :]
        return gx, [gk, gb]


class ReLU(Layer):
    kind = "relu"

    def out_shape(self, in_shape):
        return in_shape

    def apply(self, x):
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def grads(self, ctx, grad_out):
        return np.where(ctx, grad_out, 0.0), []


class LeakyReLU(Layer):
    kind = "leaky_relu"

    def __init__(self, slope: float = 0.1):
        if not 0.0 < slope < 1.0:
            raise ValueError(f"leaky slope must be in (0,1), got {slope}")
        self.slope = float(slope)

    def hyper(self):
        return {"slope": self.slope}

    def out_shape(self, in_shape):
        return in_shape

    def apply(self, x):
        mask = x > 0
        return np.where(mask, x, self.slope * x), mask

    def grads(self, ctx, grad_out):
        return np.where(ctx, grad_out, self.slope * grad_out), []


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def apply(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def grads(self, ctx, grad_out):
        return grad_out.reshape(ctx), []


class MaxPool2D(Layer):
    kind = "max_pool"

    def __init__(self, pool: int = 2, stride: Optional[int] = None):
        if pool < 1:
            raise ValueError("pool size must be >= 1")
        self.pool = int(pool)
        self.stride = int(stride) if stride is not None else int(pool)
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    def hyper(self):
        return {"pool": self.pool, "stride": self.stride}

    def _geometry(self, h, w):
        p, s = self.pool, self.stride
        if h < p or w < p:
            raise ShapeError(f"max_pool input {h}x{w} smaller than window {p}x{p}")
        return (h - p) // s + 1, (w - p) // s + 1

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"max_pool expects input [h,w,c], got shape {in_shape}")
        oh, ow = self._geometry(in_shape[0], in_shape[1])
        return (oh, ow, in_shape[2])

    def apply(self, x):
        n, h, w, c = x.shape
        p, s = self.pool, self.stride
        oh, ow = self._geometry(h, w)
        windows = np.stack(
            [x[:, i:i + s * (oh - 1) + 1:s, j:j + s * (ow - 1) + 1:s, :]
             for i in range(p) for j in range(p)],
            axis=-1,
        )
        idx = windows.argmax(axis=-1)  # first max wins on ties
        y = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
        return y, (idx, x.shape, (oh, ow))

    def grads(self, ctx, grad_out):
        idx, in_shape, (oh, ow) = ctx
        p, s = self.pool, self.stride
        gx = np.zeros(in_shape)
        for k in range(p * p):
            i, j = divmod(k, p)
            sel = idx == k
            gx[:, i:i + s * (oh - 1) + 1:s, j:j + s * (ow - 1) + 1:s, :] += np.where(
                sel, grad_out, 0.0
            )
        return gx, []


class Softmax(Layer):
    kind = "softmax"

    def out_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeError(f"softmax expects flat input, got shape {in_shape}")
        return in_shape

    def apply(self, x):
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=-1, keepdims=True)
        return y, y

    def grads(self, ctx, grad_out):
        y = ctx
        dot = (grad_out * y).sum(axis=-1, keepdims=True)
        return y * (grad_out - dot), []


LAYER_KINDS = {cls.kind: cls for cls in
               (Dense, Conv2D, ReLU, LeakyReLU, Flatten, MaxPool2D, Softmax)}
_KIND_TAGS = {"dense": 1, "conv2d": 2, "leaky_relu": 3, "relu": 4,
              "flatten": 5, "max_pool": 6, "softmax": 7}
_TAG_KINDS = {v: k for k, v in _KIND_TAGS.items()}


# ---------------------------------------------------------------------------
# Network and batches
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    """A stack of inputs with optional targets (class indices or reference
    outputs)."""

    inputs: np.ndarray
    targets: Optional[np.ndarray] = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.shape[0] < 1:
            raise ValueError("batch must contain at least one sample")
        if self.targets is not None:
            self.targets = np.asarray(self.targets)
            if self.targets.shape[0] != self.inputs.shape[0]:
                raise ValueError(
                    f"target count {self.targets.shape[0]} does not match "
                    f"batch size {self.inputs.shape[0]}"
                )

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


@dataclass
class Network:
    layers: list[Layer]
    input_shape: tuple[int, ...]

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        # validate that layer shapes compose
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.out_shape(shape)
            except ShapeError as e:
                raise ShapeError(f"layer {i} ({layer.kind}): {e}") from None
        self.output_shape = shape

    def parameter_slots(self) -> list[tuple[int, int]]:
        """(layer index, tensor index) for every parameter tensor, in order."""
        return [(i, j) for i, layer in enumerate(self.layers)
                for j in range(len(layer.param_tensors()))]

    def parameter_count(self) -> int:
        return sum(t.size for i, layer in enumerate(self.layers)
                   for t in layer.param_tensors())

    def layer_param_count(self, layer_idx: int) -> int:
        return sum(t.size for t in self.layers[layer_idx].param_tensors())

    def param_layer_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.param_tensors()]

    def copy(self) -> "Network":
        layers = [l.with_params([t.copy() for t in l.param_tensors()])
                  if l.param_tensors() else l for l in self.layers]
        return Network(layers, self.input_shape)

    def replace_layer(self, layer_idx: int, layer: Layer) -> "Network":
        """Shallow copy with one layer swapped; other tensors are shared."""
        layers = list(self.layers)
        layers[layer_idx] = layer
        return Network(layers, self.input_shape)


def _check_finite(x: np.ndarray, where: str):
    if not np.isfinite(x).all():
        raise FloatingPointError(f"non-finite values produced by {where}")


def _forward_with_ctx(net: Network, inputs: np.ndarray):
    x = np.asarray(inputs, dtype=np.float64)
    if x.shape[1:] != net.input_shape:
        raise ShapeError(
            f"batch shape {x.shape[1:]} does not match network input "
            f"shape {net.input_shape}"
        )
    ctxs = []
    for i, layer in enumerate(net.layers):
        try:
            x, ctx = layer.apply(x)
        except ShapeError as e:
            raise ShapeError(f"layer {i} ({layer.kind}): {e}") from None
        _check_finite(x, f"layer {i} ({layer.kind})")
        ctxs.append(ctx)
    return x, ctxs


def forward(net: Network, batch) -> np.ndarray:
    """Run the network on a batch (or a bare input array)."""
    inputs = batch.inputs if isinstance(batch, Batch) else batch
    out, _ = _forward_with_ctx(net, inputs)
    return out


def _backprop(net: Network, ctxs, grad_out: np.ndarray) -> list[np.ndarray]:
    grads: list[list[np.ndarray]] = [[] for _ in net.layers]
    g = grad_out
    for i in range(len(net.layers) - 1, -1, -1):
        g, pg = net.layers[i].grads(ctxs[i], g)
        grads[i] = pg
    return [t for pg in grads for t in pg]


def mse_loss(outputs: np.ndarray, targets: np.ndarray):
    """Mean over batch and output elements; returns (value, d/d_outputs)."""
    targets = np.asarray(targets, dtype=np.float64)
    if outputs.shape != targets.shape:
        raise ShapeError(
            f"mse targets shape {targets.shape} != outputs shape {outputs.shape}"
        )
    diff = outputs - targets
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def cross_entropy_loss(outputs: np.ndarray, labels: np.ndarray):
    """Negative log likelihood of integer labels; outputs must be probabilities
    (network ends with a softmax layer). Returns (value, d/d_outputs)."""
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != outputs.shape[0]:
        raise ShapeError("cross_entropy expects one integer label per sample")
    n = outputs.shape[0]
    p = np.maximum(outputs[np.arange(n), labels], 1e-300)
    grad = np.zeros_like(outputs)
    grad[np.arange(n), labels] = -1.0 / (n * p)
    return float(-np.mean(np.log(p))), grad


def loss_and_grads(net: Network, batch: Batch, loss_kind: str):
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    if batch.targets is None:
        raise ValueError(f"{loss_kind} loss requires batch targets")
    out, ctxs = _forward_with_ctx(net, batch.inputs)
    if loss_kind == "mse":
        value, grad_out = mse_loss(out, batch.targets)
    else:
        value, grad_out = cross_entropy_loss(out, batch.targets)
    return value, _backprop(net, ctxs, grad_out)


def backward(net: Network, batch: Batch, loss_kind: str) -> list[np.ndarray]:
    """Gradients of the batch loss, one array per parameter tensor."""
    return loss_and_grads(net, batch, loss_kind)[1]


def output_gradients(net: Network, inputs: np.ndarray,
                     grad_out: np.ndarray) -> list[np.ndarray]:
    """Backpropagate an arbitrary output gradient (custom losses)."""
    _, ctxs = _forward_with_ctx(net, inputs)
    return _backprop(net, ctxs, grad_out)


def sgd_step(net: Network, grads: Sequence[np.ndarray], lr: float,
             mask=None) -> Network:
    """w <- w - lr*g. Positions zeroed by the mask stay exactly 0.0."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    slots = net.parameter_slots()
    if len(grads) != len(slots):
        raise ShapeError(f"expected {len(slots)} gradients, got {len(grads)}")
    layers = list(net.layers)
    k = 0
    for i, layer in enumerate(net.layers):
        tensors = layer.param_tensors()
        if not tensors:
            continue
        new = []
        for t in tensors:
            g = grads[k]
            if g.shape != t.shape:
                raise ShapeError(
                    f"gradient shape {g.shape} != parameter shape {t.shape} "
                    f"in layer {i}"
                )
            new.append(t - lr * g)
            k += 1
        layers[i] = layer.with_params(new)
    out = Network(layers, net.input_shape)
    if mask is not None:
        from .sparsity import apply_mask
        out = apply_mask(out, mask)
    for i, layer in enumerate(out.layers):
        for t in layer.param_tensors():
            _check_finite(t, f"sgd_step on layer {i}")
    return out


def accuracy(net: Network, dataset) -> float:
    """Fraction of argmax-correct predictions (ties to the lowest class)."""
    inputs = getattr(dataset, "inputs", None)
    labels = getattr(dataset, "labels", None)
    if labels is None:
        labels = getattr(dataset, "targets", None)
    if inputs is None or labels is None:
        raise ValueError("accuracy requires a dataset with inputs and labels")
    if len(inputs) == 0:
        raise ValueError("accuracy on an empty dataset")
    preds = forward(net, np.asarray(inputs)).argmax(axis=1)
    return float(np.mean(preds == np.asarray(labels)))


# ---------------------------------------------------------------------------
# Construction from an architecture description
# ---------------------------------------------------------------------------

def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def build_network(arch: dict, seed: int) -> Network:
    """Build a seeded network from a JSON-able architecture description.

    {"input_shape": [784], "layers": [{"kind": "dense", "units": 128},
    {"kind": "leaky_relu", "slope": 0.1}, ...]}
    """
    rng = np.random.default_rng(seed)
    shape = tuple(int(d) for d in arch["input_shape"])
    layers: list[Layer] = []
    for desc in arch["layers"]:
        kind = desc["kind"]
        if kind == "dense":
            if len(shape) != 1:
                raise ShapeError(
                    f"dense layer needs flat input, got shape {shape} "
                    "(insert a flatten layer)"
                )
            units = int(desc["units"])
            w = glorot_uniform(rng, (shape[0], units), shape[0], units)
            layer = Dense(w, np.zeros(units))
        elif kind == "conv2d":
            if len(shape) != 3:
                raise ShapeError(f"conv2d needs [h,w,c] input, got shape {shape}")
            k = int(desc.get("kernel", 3))
            f = int(desc["filters"])
            cin = shape[2]
            kern = glorot_uniform(rng, (k, k, cin, f), k * k * cin, k * k * f)
            layer = Conv2D(kern, np.zeros(f), int(desc.get("stride", 1)),
                           desc.get("padding", "same"))
        elif kind == "leaky_relu":
            layer = LeakyReLU(float(desc.get("slope", 0.1)))
        elif kind == "relu":
            layer = ReLU()
        elif kind == "flatten":
            layer = Flatten()
        elif kind == "max_pool":
            layer = MaxPool2D(int(desc.get("pool", 2)), desc.get("stride"))
        elif kind == "softmax":
            layer = Softmax()
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
        shape = layer.out_shape(shape)
        layers.append(layer)
    return Network(layers, arch["input_shape"])


def load_architecture(path: str) -> dict:
    with open(path) as f:
        return json.load(f)


# ---------------------------------------------------------------------------
# Binary serialization (DEVN)
# ---------------------------------------------------------------------------

def _write_shape(out: bytearray, shape):
    out += struct.pack("<B", len(shape))
    for d in shape:
        out += struct.pack("<I", d)


def _read_shape(buf: memoryview, off: int):
    (ndim,) = struct.unpack_from("<B", buf, off)
    off += 1
    dims = struct.unpack_from(f"<{ndim}I", buf, off)
    return tuple(dims), off + 4 * ndim


def _write_hyper(out: bytearray, layer: Layer):
    if layer.kind == "conv2d":
        out += struct.pack("<BB", layer.stride, 1 if layer.padding == "same" else 0)
    elif layer.kind == "leaky_relu":
        out += struct.pack("<d", layer.slope)
    elif layer.kind == "max_pool":
        out += struct.pack("<BB", layer.pool, layer.stride)


def _read_hyper(kind: str, buf: memoryview, off: int):
    if kind == "conv2d":
        stride, same = struct.unpack_from("<BB", buf, off)
        return {"stride": stride, "padding": "same" if same else "valid"}, off + 2
    if kind == "leaky_relu":
        (slope,) = struct.unpack_from("<d", buf, off)
        return {"slope": slope}, off + 8
    if kind == "max_pool":
        pool, stride = struct.unpack_from("<BB", buf, off)
        return {"pool": pool, "stride": stride}, off + 2
    return {}, off


def serialize_network(net: Network) -> bytes:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<H", FORMAT_VERSION)
    _write_shape(out, net.input_shape)
    out += struct.pack("<H", len(net.layers))
    for layer in net.layers:
        out += struct.pack("<B", _KIND_TAGS[layer.kind])
        _write_hyper(out, layer)
        tensors = layer.param_tensors()
        out += struct.pack("<B", len(tensors))
        for t in tensors:
            _write_shape(out, t.shape)
            out += np.ascontiguousarray(t, dtype="<f8").tobytes()
    return bytes(out)


def _layer_from_parts(kind: str, hyper: dict, tensors: list[np.ndarray]) -> Layer:
    if kind == "dense":
        return Dense(*tensors)
    if kind == "conv2d":
        return Conv2D(tensors[0], tensors[1], hyper["stride"], hyper["padding"])
    if kind == "leaky_relu":
        return LeakyReLU(hyper["slope"])
    if kind == "relu":
        return ReLU()
    if kind == "flatten":
        return Flatten()
    if kind == "max_pool":
        return MaxPool2D(hyper["pool"], hyper["stride"])
    if kind == "softmax":
        return Softmax()
    raise ValueError(f"unknown layer kind {kind!r}")


def deserialize_network(data: bytes) -> Network:
    buf = memoryview(data)
    if bytes(buf[:4]) != MAGIC:
        raise ValueError(f"bad model magic {bytes(buf[:4])!r} at offset 0")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {version}")
    input_shape, off = _read_shape(buf, 6)
    (n_layers,) = struct.unpack_from("<H", buf, off)
    off += 2
    layers = []
    for _ in range(n_layers):
        (tag,) = struct.unpack_from("<B", buf, off)
        off += 1
        if tag not in _TAG_KINDS:
            raise ValueError(f"unknown layer tag {tag} at offset {off - 1}")
        kind = _TAG_KINDS[tag]
        hyper, off = _read_hyper(kind, buf, off)
        (n_tensors,) = struct.unpack_from("<B", buf, off)
        off += 1
        tensors = []
        for _ in range(n_tensors):
            shape, off = _read_shape(buf, off)
            size = int(np.prod(shape)) if shape else 1
            end = off + 8 * size
            if end > len(buf):
                raise ValueError(f"truncated tensor data at offset {off}")
            t = np.frombuffer(buf[off:end], dtype="<f8").reshape(shape).copy()
            tensors.append(t)
            off = end
        layers.append(_layer_from_parts(kind, hyper, tensors))
    return Network(layers, input_shape)


def save_network(net: Network, path: str):
    with open(path, "wb") as f:
        f.write(serialize_network(net))


def load_network(path: str) -> Network:
    with open(path, "rb") as f:
        return deserialize_network(f.read())
