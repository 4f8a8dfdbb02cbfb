"""Minimal reverse-mode network stack on float64 numpy.

Supports exactly the pieces the experiments need: dense, valid-padding conv,
non-overlapping max pooling, inverted dropout, elu/relu/tanh, and a softmax
output head.  Layers cache what their backward pass needs, so a model instance
is single-writer during training.  Per-sample losses use soft (distributed)
targets throughout.
"""
from __future__ import annotations

import math
import struct

import numpy as np

from .errors import ConfigurationError, NumericError, ParseError

DTYPE = np.float64
LOG_FLOOR = 1e-12
MODEL_MAGIC = b"HNM1"

LOSS_KINDS = ("cross-entropy", "squared-error")


def _assert_finite(arr, layer_name, phase):
    # One add-reduction per check: sum propagates any NaN/Inf to the scalar.
    if not math.isfinite(float(np.sum(arr))):
        raise NumericError(f"non-finite values in {phase} of layer {layer_name}")


class Tensor:
    """Parameter holder: float64 value plus an optional gradient buffer."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.array(value, dtype=DTYPE)
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size


def _glorot(rng, shape, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape))


class Layer:
    """Common layer interface; subclasses fill params during build()."""

    def __init__(self):
        self.name = type(self).__name__.lower()
        self.params: list[Tensor] = []

    def build(self, in_shape, rng):
        return in_shape

    def forward(self, x, training, rng):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def descriptor(self):
        raise NotImplementedError


class Dense(Layer):
    def __init__(self, units):
        super().__init__()
        if units < 1:
            raise ConfigurationError("dense layer needs at least one unit")
        self.units = int(units)

    def build(self, in_shape, rng):
        fan_in = int(np.prod(in_shape))
        self.w = _glorot(rng, (fan_in, self.units), fan_in, self.units)
        self.b = Tensor(np.zeros(self.units))
        self.params = [self.w, self.b]
        return (self.units,)

    def forward(self, x, training, rng):
        self._in_shape = x.shape
        self._x = x.reshape(x.shape[0], -1)
        return self._x @ self.w.value + self.b.value

    def backward(self, dy):
        self.w.grad += self._x.T @ dy
        self.b.grad += dy.sum(axis=0)
        return (dy @ self.w.value.T).reshape(self._in_shape)

    def descriptor(self):
        return f"dense:{self.units}"


class Conv2D(Layer):
    """Valid-padding, stride-1 convolution over NHWC input via im2col."""

    def __init__(self, filters, kh, kw):
        super().__init__()
        self.filters, self.kh, self.kw = int(filters), int(kh), int(kw)
        if min(self.filters, self.kh, self.kw) < 1:
            raise ConfigurationError("conv layer needs positive filters and kernel dims")

    def build(self, in_shape, rng):
        if len(in_shape) != 3:
            raise ConfigurationError(f"conv layer expects HxWxC input, got {in_shape}")
        h, w, c = in_shape
        if h < self.kh or w < self.kw:
            raise ConfigurationError(f"kernel {self.kh}x{self.kw} larger than input {h}x{w}")
        self.in_channels = c
        k = self.kh * self.kw * c
        self.w = _glorot(rng, (k, self.filters), k, self.filters)
        self.b = Tensor(np.zeros(self.filters))
        self.params = [self.w, self.b]
        return (h - self.kh + 1, w - self.kw + 1, self.filters)

    def _im2col(self, x):
        n, h, w, c = x.shape
        ho, wo = h - self.kh + 1, w - self.kw + 1
        cols = np.empty((n, ho, wo, self.kh * self.kw * c), dtype=DTYPE)
        for i in range(self.kh):
            for j in range(self.kw):
                patch = x[:, i:i + ho, j:j + wo, :]
                cols[..., (i * self.kw + j) * c:(i * self.kw + j + 1) * c] = patch
        return cols

    def forward(self, x, training, rng):
        self._in_shape = x.shape
        self._cols = self._im2col(x)
        y = self._cols @ self.w.value + self.b.value
        return y

    def backward(self, dy):
        n, ho, wo, f = dy.shape
        cols2 = self._cols.reshape(-1, self._cols.shape[-1])
        dy2 = dy.reshape(-1, f)
        self.w.grad += cols2.T @ dy2
        self.b.grad += dy2.sum(axis=0)
        dcols = (dy2 @ self.w.value.T).reshape(self._cols.shape)
        dx = np.zeros(self._in_shape, dtype=DTYPE)
        c = self.in_channels
        for i in range(self.kh):
            for j in range(self.kw):
                sl = dcols[..., (i * self.kw + j) * c:(i * self.kw + j + 1) * c]
                dx[:, i:i + ho, j:j + wo, :] += sl
        return dx

    def descriptor(self):
        return f"conv:{self.filters}x{self.kh}x{self.kw}"


class MaxPool2D(Layer):
    """Non-overlapping pooling; gradient routes to the first max per window."""

    def __init__(self, pool):
        super().__init__()
        self.pool = int(pool)
        if self.pool < 1:
            raise ConfigurationError("pool size must be positive")

    def build(self, in_shape, rng):
        if len(in_shape) != 3:
            raise ConfigurationError(f"maxpool expects HxWxC input, got {in_shape}")
        h, w, c = in_shape
        if h < self.pool or w < self.pool:
            raise ConfigurationError(f"pool {self.pool} larger than input {h}x{w}")
        return (h // self.pool, w // self.pool, c)

    def forward(self, x, training, rng):
        n, h, w, c = x.shape
        p = self.pool
        ho, wo = h // p, w // p
        self._in_shape = x.shape
        xr = x[:, :ho * p, :wo * p, :].reshape(n, ho, p, wo, p, c)
        windows = xr.transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, p * p)
        self._argmax = windows.argmax(axis=-1)
        return np.take_along_axis(windows, self._argmax[..., None], axis=-1)[..., 0]

    def backward(self, dy):
        n, h, w, c = self._in_shape
        p = self.pool
        ho, wo = h // p, w // p
        dwin = np.zeros((n, ho, wo, c, p * p), dtype=DTYPE)
        np.put_along_axis(dwin, self._argmax[..., None], dy[..., None], axis=-1)
        dx = np.zeros(self._in_shape, dtype=DTYPE)
        dxr = dwin.reshape(n, ho, wo, c, p, p).transpose(0, 1, 4, 2, 5, 3)
        dx[:, :ho * p, :wo * p, :] = dxr.reshape(n, ho * p, wo * p, c)
        return dx

    def descriptor(self):
        return f"maxpool:{self.pool}"


class Dropout(Layer):
    def __init__(self, rate):
        super().__init__()
        self.rate = float(rate)
        if not 0.0 <= self.rate < 1.0:
            raise ConfigurationError(f"dropout rate must be in [0, 1), got {self.rate}")

    def forward(self, x, training, rng):
        if not training or self.rate == 0.0:
            self._mask = None
            return x
        if rng is None:
            raise ConfigurationError("dropout in training mode needs an rng")
        self._mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * self._mask

    def backward(self, dy):
        if self._mask is None:
            return dy
        return dy * self._mask

    def descriptor(self):
        return f"dropout:{self.rate:g}"


class Activation(Layer):
    KINDS = ("elu", "relu", "tanh")

    def __init__(self, kind):
        super().__init__()
        if kind not in self.KINDS:
            raise ConfigurationError(f"unknown activation {kind!r}")
        self.kind = kind
        self.name = kind

    def forward(self, x, training, rng):
        self._x = x
        if self.kind == "elu":
            self._y = np.where(x > 0, x, np.expm1(x))
        elif self.kind == "relu":
            self._y = np.maximum(x, 0.0)
        else:
            self._y = np.tanh(x)
        return self._y

    def backward(self, dy):
        if self.kind == "elu":
            return dy * np.where(self._x > 0, 1.0, self._y + 1.0)
        if self.kind == "relu":
            return dy * (self._x > 0)
        return dy * (1.0 - self._y ** 2)

    def descriptor(self):
        return self.kind


class Softmax(Layer):
    """Output head; rows of the forward result are probability vectors."""

    def build(self, in_shape, rng):
        if len(in_shape) != 1:
            raise ConfigurationError(f"softmax expects a flat input, got {in_shape}")
        return in_shape

    def forward(self, x, training, rng):
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        self._p = e / e.sum(axis=1, keepdims=True)
        return self._p

    def backward(self, dy):
        p = self._p
        return p * (dy - (dy * p).sum(axis=1, keepdims=True))

    def descriptor(self):
        return "softmax"


def _parse_layer(token):
    kind, _, arg = token.partition(":")
    kind = kind.strip()
    arg = arg.strip()
    if kind == "dense":
        return Dense(int(arg))
    if kind == "conv":
        f, kh, kw = (int(v) for v in arg.split("x"))
        return Conv2D(f, kh, kw)
    if kind == "maxpool":
        dims = arg.split("x")
        if len(dims) == 2 and dims[0] != dims[1]:
            raise ConfigurationError("only square pooling windows are supported")
        return MaxPool2D(int(dims[0]))
    if kind == "dropout":
        return Dropout(float(arg))
    if kind in Activation.KINDS:
        return Activation(kind)
    if kind == "softmax":
        return Softmax()
    raise ConfigurationError(f"unknown layer spec {token!r}")


class Model:
    """Ordered layer stack built from a spec string like
    ``conv:32x3x3;elu;maxpool:2;dropout:0.2;dense:10;softmax``."""

    def __init__(self, spec, input_shape, rng):
        tokens = [t.strip() for t in spec.strip().lower().split(";") if t.strip()]
        if not tokens:
            raise ConfigurationError("empty model spec")
        if tokens[-1] != "softmax":
            raise ConfigurationError("model spec must end with softmax")
        if tokens.count("softmax") != 1:
            raise ConfigurationError("model spec must contain exactly one softmax")
        self.spec = ";".join(tokens)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.layers = []
        shape = self.input_shape
        counts = {}
        for tok in tokens:
            layer = _parse_layer(tok)
            shape = layer.build(shape, rng)
            counts[layer.name] = counts.get(layer.name, 0) + 1
            layer.name = f"{layer.name}{counts[layer.name]}"
            self.layers.append(layer)
        self.output_shape = shape

    @property
    def parameters(self):
        return [p for layer in self.layers for p in layer.params]

    @property
    def n_params(self):
        return sum(p.size for p in self.parameters)

    def zero_grad(self):
        for p in self.parameters:
            p.grad = np.zeros_like(p.value)

    def forward(self, batch, training=False, rng=None):
        x = np.asarray(batch, dtype=DTYPE)
        if x.ndim < 2 or x.shape[1:] != self.input_shape:
            raise ConfigurationError(
                f"batch shape {x.shape} does not match input shape {self.input_shape}")
        for layer in self.layers:
            x = layer.forward(x, training, rng)
            _assert_finite(x, layer.name, "forward")
        return x

    def backward(self, dprobs):
        for p in self.parameters:
            if p.grad is None:
                p.grad = np.zeros_like(p.value)
        dy = np.asarray(dprobs, dtype=DTYPE)
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
            _assert_finite(dy, layer.name, "backward")
            for p in layer.params:
                _assert_finite(p.grad, layer.name, "backward")
        return dy


def loss_per_sample(probs, targets, kind="cross-entropy"):
    """Row-wise loss against soft targets.

    Cross-entropy floors probabilities at 1e-12 (clipped to [floor, 1]) so
    losses stay finite and nonnegative; squared error sums over classes.
    """
    probs = np.asarray(probs, dtype=DTYPE)
    targets = np.asarray(targets, dtype=DTYPE)
    if probs.shape != targets.shape or probs.ndim != 2:
        raise ConfigurationError(
            f"probs shape {probs.shape} does not match targets shape {targets.shape}")
    if np.abs(targets.sum(axis=1) - 1.0).max() > 1e-6:
        raise ConfigurationError("target rows must sum to 1")
    if kind == "cross-entropy":
        return -(targets * np.log(np.clip(probs, LOG_FLOOR, 1.0))).sum(axis=1)
    if kind == "squared-error":
        return ((probs - targets) ** 2).sum(axis=1)
    raise ConfigurationError(f"unknown loss kind {kind!r}")


def loss_grad(probs, targets, kind="cross-entropy"):
    """Gradient of the summed per-sample loss with respect to probs."""
    if kind == "cross-entropy":
        g = -targets / np.clip(probs, LOG_FLOOR, 1.0)
        g[probs < LOG_FLOOR] = 0.0
        return g
    if kind == "squared-error":
        return 2.0 * (probs - targets)
    raise ConfigurationError(f"unknown loss kind {kind!r}")


class SGD:
    """Plain SGD with optional heavy-ball momentum: v = mu*v + g; w -= lr*v."""

    def __init__(self, learning_rate=0.01, momentum=0.9):
        if learning_rate < 0:
            raise ConfigurationError("learning rate must be nonnegative")
        if not 0.0 <= momentum < 1.0:
            raise ConfigurationError("momentum must be in [0, 1)")
        self.learning_rate = float(learning_rate)
        self.momentum = float(momentum)
        self._velocity = None

    def step(self, params):
        if self._velocity is None:
            self._velocity = [np.zeros_like(p.value) for p in params]
        if len(self._velocity) != len(params):
            raise ConfigurationError("optimizer bound to a different parameter list")
        for p, v in zip(params, self._velocity):
            if p.grad is None:
                raise ConfigurationError("step() before any backward pass")
            v *= self.momentum
            v += p.grad
            p.value -= self.learning_rate * v


def make_optimizer(kind, learning_rate=0.01, momentum=0.9):
    if kind == "sgd":
        return SGD(learning_rate, momentum=0.0)
    if kind == "sgd-momentum":
        return SGD(learning_rate, momentum=momentum)
    raise ConfigurationError(f"unknown optimizer kind {kind!r}")


def backward_and_step(model, batch, targets, optimizer, loss_kind="cross-entropy", rng=None):
    """One training step on a batch; returns the pre-update mean loss."""
    probs = model.forward(batch, training=True, rng=rng)
    losses = loss_per_sample(probs, targets, loss_kind)
    model.zero_grad()
    model.backward(loss_grad(probs, targets, loss_kind) / len(losses))
    optimizer.step(model.parameters)
    return float(losses.mean())


def flat_grads(model):
    return np.concatenate([p.grad.ravel() for p in model.parameters])


def per_sample_grad_norms(model, batch, targets, loss_kind="cross-entropy"):
    """L2 norm of the full parameter gradient taken one sample at a time.

    Evaluation-mode forward (no dropout), so the result is deterministic.
    """
    batch = np.asarray(batch, dtype=DTYPE)
    targets = np.asarray(targets, dtype=DTYPE)
    norms = np.empty(len(batch), dtype=DTYPE)
    for i in range(len(batch)):
        probs = model.forward(batch[i:i + 1], training=False)
        model.zero_grad()
        model.backward(loss_grad(probs, targets[i:i + 1], loss_kind))
        norms[i] = math.sqrt(float(np.sum(flat_grads(model) ** 2)))
    return norms


def _read_exact(fh, n):
    data = fh.read(n)
    if len(data) != n:
        raise ParseError("truncated model file", offset=fh.tell())
    return data


def save_model(model, path):
    """Write a checkpoint: magic, length-prefixed descriptor, raw tensors.

    All integers are 64-bit little-endian; tensor data is raw little-endian
    float64 in row-major order.
    """
    desc = f"{model.spec}|input={','.join(map(str, model.input_shape))}".encode()
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<Q", len(desc)))
        fh.write(desc)
        for p in model.parameters:
            fh.write(struct.pack("<Q", p.value.ndim))
            fh.write(struct.pack(f"<{p.value.ndim}Q", *p.value.shape))
            fh.write(p.value.astype("<f8").tobytes())


def load_model(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MODEL_MAGIC:
            raise ParseError(f"bad model magic {magic!r}", offset=0)
        (desc_len,) = struct.unpack("<Q", _read_exact(fh, 8))
        desc = _read_exact(fh, desc_len).decode()
        try:
            spec, input_part = desc.rsplit("|input=", 1)
            input_shape = tuple(int(d) for d in input_part.split(","))
        except ValueError as exc:
            raise ParseError(f"bad model descriptor {desc!r}", offset=12) from exc
        model = Model(spec, input_shape, rng=np.random.default_rng(0))
        for p in model.parameters:
            (rank,) = struct.unpack("<Q", _read_exact(fh, 8))
            shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
            if tuple(shape) != p.value.shape:
                raise ParseError(
                    f"tensor shape {shape} does not match descriptor shape {p.value.shape}",
                    offset=fh.tell())
            raw = _read_exact(fh, 8 * int(np.prod(shape, dtype=np.int64)))
            p.value = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(DTYPE)
        extra = fh.read(1)
        if extra:
            raise ParseError("trailing bytes after last tensor", offset=fh.tell() - 1)
    return model
