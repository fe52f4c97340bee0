"""Forward/backward kernels and stateful layer objects.

Every kernel comes as a ``*_forward`` function returning ``(output, cache)``
and a ``*_backward`` function consuming the cache. The layer classes own
their parameters, gradients and running buffers and wrap those kernels.
Activations are NHWC; convolutions use stride 1 and same padding, and ReLU
is fused into convolution and dense layers.
"""
from __future__ import annotations

import enum
import struct
from typing import Dict, Optional

import numpy as np

from .errors import DimensionError, DomainError, StateError
from .tensor import DTYPE, Rng, col2im, im2col, read_tensor, write_tensor

BN_EPSILON = 1e-3
BN_MOMENTUM = 0.99


class Mode(enum.Enum):
    TRAIN = "train"
    INFER = "infer"


def he_uniform(rng: Rng, shape, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(DTYPE)


# --------------------------------------------------------------------------
# kernels

def conv2d_forward(x, weight, bias):
    """Same-padded stride-1 convolution followed by ReLU.

    ``x`` is ``[N, H, W, Cin]`` and ``weight`` is ``[k, k, Cin, Cout]`` with
    ``k`` odd. Returns ``(y, cache)`` with ``y`` of shape ``[N, H, W, Cout]``.
    """
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 4:
        raise DimensionError(f"conv2d expects [N,H,W,C] input, got {x.shape}")
    k, k2, cin, cout = weight.shape
    if k != k2 or k % 2 == 0:
        raise DimensionError(f"conv2d needs a square odd kernel, got {weight.shape[:2]}")
    if x.shape[3] != cin:
        raise DimensionError(f"input has {x.shape[3]} channels but kernel {weight.shape} expects {cin}")
    n, h, w, _ = x.shape
    cols = im2col(x, k, pad=k // 2)
    z = cols @ weight.reshape(k * k * cin, cout) + bias
    mask = z > 0
    y = np.where(mask, z, 0.0).reshape(n, h, w, cout)
    return y, (cols, x.shape, weight, mask)


def conv2d_backward(dy, cache):
    """Gradients ``(dx, dW, db)`` of a :func:`conv2d_forward` call."""
    if cache is None:
        raise StateError("conv2d backward called without a matching forward")
    cols, xshape, weight, mask = cache
    k, _, cin, cout = weight.shape
    dz = np.asarray(dy, dtype=DTYPE).reshape(-1, cout) * mask
    db = dz.sum(axis=0)
    dw = (cols.T @ dz).reshape(weight.shape)
    dcols = dz @ weight.reshape(k * k * cin, cout).T
    dx = col2im(dcols, xshape, k, pad=k // 2)
    return dx, dw, db


def maxpool_forward(x, size: int = 2, stride: int = 2):
    """Window max over ``size x size`` windows; output extent ``(H - size) // stride + 1``."""
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 4:
        raise DimensionError(f"maxpool expects [N,H,W,C] input, got {x.shape}")
    if size < 1 or stride < 1:
        raise DomainError(f"invalid pool size={size}, stride={stride}")
    n, h, w, c = x.shape
    if h < size or w < size:
        raise DimensionError(f"pool window {size} larger than input {h}x{w}")
    ho = (h - size) // stride + 1
    wo = (w - size) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (size, size), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    win = win.reshape(n, ho, wo, c, size * size)
    arg = win.argmax(axis=-1)  # first maximal index on ties
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(y), (x.shape, arg, size, stride)


def maxpool_backward(dy, cache):
    if cache is None:
        raise StateError("maxpool backward called without a matching forward")
    xshape, arg, size, stride = cache
    n, h, w, c = xshape
    _, ho, wo, _ = arg.shape
    rows = (np.arange(ho) * stride)[None, :, None, None] + arg // size
    cols = (np.arange(wo) * stride)[None, None, :, None] + arg % size
    nn = np.broadcast_to(np.arange(n)[:, None, None, None], arg.shape)
    cc = np.broadcast_to(np.arange(c)[None, None, None, :], arg.shape)
    dx = np.zeros(xshape, dtype=DTYPE)
    if stride >= size:
        dx[nn, rows, cols, cc] = dy  # disjoint windows: no collisions
    else:
        np.add.at(dx, (nn, rows, cols, cc), dy)
    return dx


def dense_forward(x, weight, bias, relu: bool = True):
    """``max(0, x @ W + b)`` (or the affine part alone with ``relu=False``)."""
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"dense input {x.shape} does not match weight {weight.shape}")
    z = x @ weight + bias
    if not relu:
        return z, (x, weight, None)
    mask = z > 0
    return np.where(mask, z, 0.0), (x, weight, mask)


def dense_backward(dy, cache, dw_out=None):
    """``(dx, dW, db)``; ``dW`` is written into ``dw_out`` when given."""
    if cache is None:
        raise StateError("dense backward called without a matching forward")
    x, weight, mask = cache
    dz = np.asarray(dy, dtype=DTYPE)
    if mask is not None:
        dz = dz * mask
    return dz @ weight.T, np.matmul(x.T, dz, out=dw_out), dz.sum(axis=0)


def batchnorm_forward(x, gamma, beta, running_mean, running_var, mode: Mode,
                      momentum: float = BN_MOMENTUM, eps: float = BN_EPSILON):
    """Normalise over every axis but the last.

    In train mode the batch statistics are used and the running buffers are
    updated in place, ``r <- momentum * r + (1 - momentum) * batch_stat``
    (biased batch variance). In infer mode the running buffers are used.
    """
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[-1] != gamma.shape[0]:
        raise DimensionError(f"batchnorm input {x.shape} does not match {gamma.shape[0]} features")
    axes = tuple(range(x.ndim - 1))
    if mode is Mode.TRAIN:
        count = int(np.prod([x.shape[a] for a in axes]))
        if count < 2:
            raise DomainError("batch normalisation in train mode needs at least 2 samples")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean, var = running_mean.copy(), running_var.copy()
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return xhat * gamma + beta, (xhat, inv_std, gamma, mode)


def batchnorm_backward(dy, cache):
    if cache is None:
        raise StateError("batchnorm backward called without a matching forward")
    xhat, inv_std, gamma, mode = cache
    dy = np.asarray(dy, dtype=DTYPE)
    axes = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * gamma
    if mode is Mode.INFER:
        return dxhat * inv_std, dgamma, dbeta
    m = int(np.prod([dy.shape[a] for a in axes]))
    dx = (inv_std / m) * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, dgamma, dbeta


def dropout_forward(x, p: float, mode: Mode, rng: Optional[Rng] = None):
    """Inverted dropout. Returns ``(y, mask)``; ``mask`` is ``None`` when inactive."""
    if not 0.0 <= p < 1.0:
        raise DomainError(f"dropout probability must lie in [0, 1), got {p}")
    x = np.asarray(x, dtype=DTYPE)
    if mode is Mode.INFER or p == 0.0:
        return x, None
    if rng is None:
        raise StateError("train-mode dropout needs an Rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * mask, mask


def dropout_backward(dy, mask):
    return dy if mask is None else dy * mask


def softmax(x):
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 2 or x.shape[1] < 2:
        raise DimensionError(f"softmax expects [N, c>=2], got {x.shape}")
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# --------------------------------------------------------------------------
# layer objects

class Layer:
    """Base layer: named parameter, gradient and buffer stores plus a cache."""

    trainable = False

    def __init__(self, name: str):
        self.name = name
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self.buffers: Dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x, mode: Mode):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def _take_cache(self):
        cache, self._cache = self._cache, None
        if cache is None:
            raise StateError(f"{self.name}: backward called without a matching forward")
        return cache

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r})"


class Conv2D(Layer):
    trainable = True

    def __init__(self, name, kernel: int, in_channels: int, out_channels: int, rng: Rng):
        super().__init__(name)
        fan_in = kernel * kernel * in_channels
        self.params["weight"] = he_uniform(rng.child("weight"), (kernel, kernel, in_channels, out_channels), fan_in)
        self.params["bias"] = np.zeros(out_channels, dtype=DTYPE)

    def forward(self, x, mode):
        y, self._cache = conv2d_forward(x, self.params["weight"], self.params["bias"])
        return y

    def backward(self, dy):
        dx, self.grads["weight"], self.grads["bias"] = conv2d_backward(dy, self._take_cache())
        return dx


class MaxPool2D(Layer):
    def __init__(self, name, size: int = 2, stride: int = 2):
        super().__init__(name)
        self.size, self.stride = size, stride

    def forward(self, x, mode):
        y, self._cache = maxpool_forward(x, self.size, self.stride)
        return y

    def backward(self, dy):
        return maxpool_backward(dy, self._take_cache())


class Flatten(Layer):
    def forward(self, x, mode):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._take_cache())


class Dense(Layer):
    trainable = True

    def __init__(self, name, in_features: int, units: int, rng: Rng, relu: bool = True):
        super().__init__(name)
        self.relu = relu
        self.params["weight"] = he_uniform(rng.child("weight"), (in_features, units), in_features)
        self.params["bias"] = np.zeros(units, dtype=DTYPE)

    def forward(self, x, mode):
        y, self._cache = dense_forward(x, self.params["weight"], self.params["bias"], relu=self.relu)
        return y

    def backward(self, dy):
        dx, self.grads["weight"], self.grads["bias"] = dense_backward(
            dy, self._take_cache(), self.grads.get("weight"))
        return dx


class BatchNorm(Layer):
    trainable = True

    def __init__(self, name, features: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPSILON):
        super().__init__(name)
        self.momentum, self.eps = momentum, eps
        self.params["gamma"] = np.ones(features, dtype=DTYPE)
        self.params["beta"] = np.zeros(features, dtype=DTYPE)
        self.buffers["running_mean"] = np.zeros(features, dtype=DTYPE)
        self.buffers["running_var"] = np.ones(features, dtype=DTYPE)

    def forward(self, x, mode):
        y, self._cache = batchnorm_forward(
            x, self.params["gamma"], self.params["beta"],
            self.buffers["running_mean"], self.buffers["running_var"],
            mode, self.momentum, self.eps,
        )
        return y

    def backward(self, dy):
        dx, self.grads["gamma"], self.grads["beta"] = batchnorm_backward(dy, self._take_cache())
        return dx


class Dropout(Layer):
    def __init__(self, name, p: float, rng: Optional[Rng] = None):
        super().__init__(name)
        if not 0.0 <= p < 1.0:
            raise DomainError(f"dropout probability must lie in [0, 1), got {p}")
        self.p = p
        self.rng = rng

    def forward(self, x, mode):
        y, mask = dropout_forward(x, self.p, mode, self.rng)
        self._cache = (mask,)
        return y

    def backward(self, dy):
        (mask,) = self._take_cache()
        return dropout_backward(dy, mask)


class SoftmaxOutput(Layer):
    """Affine layer followed by softmax.

    :meth:`backward` takes the gradient with respect to the pre-softmax
    logits, as returned by :func:`cxrvgg.optim.cross_entropy`.
    """

    trainable = True

    def __init__(self, name, in_features: int, classes: int, rng: Rng):
        super().__init__(name)
        self.params["weight"] = he_uniform(rng.child("weight"), (in_features, classes), in_features)
        self.params["bias"] = np.zeros(classes, dtype=DTYPE)

    def forward(self, x, mode):
        z, self._cache = dense_forward(x, self.params["weight"], self.params["bias"], relu=False)
        return softmax(z)

    def backward(self, dlogits):
        dx, self.grads["weight"], self.grads["bias"] = dense_backward(
            dlogits, self._take_cache(), self.grads.get("weight"))
        return dx


# --------------------------------------------------------------------------
# checkpoint: magic, uint32 record count, then per record
#   uint16 len + utf-8 layer name, uint16 len + utf-8 entry name, tensor dump

CHECKPOINT_MAGIC = b"CXRCKPT1"


def write_checkpoint(path, records) -> None:
    """Write ``(layer name, entry name, array)`` records in order."""
    records = list(records)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(records)))
        for layer, entry, value in records:
            for text in (layer, entry):
                raw = text.encode("utf-8")
                fh.write(struct.pack("<H", len(raw)))
                fh.write(raw)
            write_tensor(fh, value)


def read_checkpoint(path):
    """Inverse of :func:`write_checkpoint`; returns the list of records."""
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise StateError(f"{path}: not a checkpoint file")
        (count,) = struct.unpack("<I", fh.read(4))
        records = []
        for _ in range(count):
            names = []
            for _ in range(2):
                (size,) = struct.unpack("<H", fh.read(2))
                names.append(fh.read(size).decode("utf-8"))
            records.append((names[0], names[1], read_tensor(fh)))
    return records
