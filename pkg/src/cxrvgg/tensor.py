"""Dense float64 arrays, the layout kernels built on them, and seeded RNG streams.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in row-major
(C) order. This module holds the handful of kernels the layers need on top
of numpy (im2col / col2im, checked matmul and reductions), the binary dump
format used for checkpoints and golden files, and :class:`Rng`.
"""
from __future__ import annotations

import hashlib
import struct
from typing import BinaryIO, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, DomainError

DTYPE = np.float64


def as_tensor(x) -> np.ndarray:
    """Return ``x`` as a C-contiguous float64 array (no copy if already one)."""
    return np.ascontiguousarray(x, dtype=DTYPE)


def flat_index(shape: Sequence[int], index: Sequence[int]) -> int:
    """Row-major address of ``index`` inside an array of ``shape``."""
    if len(shape) != len(index):
        raise DimensionError(f"index {tuple(index)} has wrong rank for shape {tuple(shape)}")
    addr = 0
    for extent, i in zip(shape, index):
        if not 0 <= i < extent:
            raise DimensionError(f"index {tuple(index)} out of range for shape {tuple(shape)}")
        addr = addr * extent + i
    return addr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of a rank-2 ``[m, k]`` and a rank-2 ``[k, n]`` tensor."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def conv_output_size(size: int, kernel: int, pad: int, stride: int) -> int:
    if kernel < 1 or stride < 1 or pad < 0:
        raise DomainError(f"invalid kernel={kernel}, pad={pad}, stride={stride}")
    if size + 2 * pad < kernel:
        raise DimensionError(f"kernel {kernel} larger than padded extent {size + 2 * pad}")
    return (size + 2 * pad - kernel) // stride + 1


def im2col(x: np.ndarray, kernel: int, pad: int = 0, stride: int = 1) -> np.ndarray:
    """Unfold receptive fields into rows.

    ``x`` is ``[H, W, C]`` or a batch ``[N, H, W, C]``. The result has one row
    per output position (batch-major, then row-major over ``Ho x Wo``) and
    ``kernel * kernel * C`` columns ordered ``(ky, kx, c)``. Padding is zeros.
    """
    x = np.asarray(x, dtype=DTYPE)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise DimensionError(f"im2col expects [H,W,C] or [N,H,W,C], got {x.shape}")
    n, h, w, c = x.shape
    ho = conv_output_size(h, kernel, pad, stride)
    wo = conv_output_size(w, kernel, pad, stride)
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    # [N, H', W', C, k, k] -> strided -> [N, Ho, Wo, k, k, C]
    win = sliding_window_view(x, (kernel, kernel), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kernel * kernel * c)
    return np.ascontiguousarray(cols)


def col2im(cols: np.ndarray, shape: Sequence[int], kernel: int, pad: int = 0, stride: int = 1) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add rows back onto an ``[N, H, W, C]`` array."""
    n, h, w, c = shape
    ho = conv_output_size(h, kernel, pad, stride)
    wo = conv_output_size(w, kernel, pad, stride)
    cols = np.asarray(cols, dtype=DTYPE).reshape(n, ho, wo, kernel, kernel, c)
    out = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=DTYPE)
    for ky in range(kernel):
        ys = slice(ky, ky + (ho - 1) * stride + 1, stride)
        for kx in range(kernel):
            xs = slice(kx, kx + (wo - 1) * stride + 1, stride)
            out[:, ys, xs, :] += cols[:, :, :, ky, kx, :]
    if pad:
        out = out[:, pad:-pad, pad:-pad, :]
    return np.ascontiguousarray(out)


def reduce(x: np.ndarray, axes: Iterable[int] | None = None, kind: str = "sum", keepdims: bool = False):
    """Sum, mean or max over ``axes`` (all axes when ``None``)."""
    x = np.asarray(x, dtype=DTYPE)
    if axes is None:
        axes = tuple(range(x.ndim))
    else:
        axes = tuple(a + x.ndim if a < 0 else a for a in axes)
        if len(set(axes)) != len(axes) or any(not 0 <= a < x.ndim for a in axes):
            raise DimensionError(f"invalid axes {axes} for shape {x.shape}")
    if kind == "sum":
        return np.sum(x, axis=axes, keepdims=keepdims)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if kind == "mean":
        if count == 0:
            raise DomainError("mean over an empty reduction")
        return np.sum(x, axis=axes, keepdims=keepdims) / count
    if kind == "max":
        if count == 0:
            raise DomainError("max over an empty reduction")
        return np.max(x, axis=axes, keepdims=keepdims)
    raise DomainError(f"unknown reduction kind {kind!r}")


# --------------------------------------------------------------------------
# binary dump: little-endian uint32 rank, rank x uint64 extents, float64 data

def write_tensor(fh: BinaryIO, x: np.ndarray) -> None:
    x = np.asarray(x, dtype=DTYPE)
    fh.write(struct.pack("<I", x.ndim))
    fh.write(struct.pack(f"<{x.ndim}Q", *x.shape))
    fh.write(np.ascontiguousarray(x, dtype="<f8").tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray:
    head = fh.read(4)
    if len(head) != 4:
        raise EOFError("truncated tensor header")
    (rank,) = struct.unpack("<I", head)
    shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
    count = int(np.prod(shape)) if rank else 1
    raw = fh.read(8 * count)
    if len(raw) != 8 * count:
        raise EOFError("truncated tensor data")
    return np.frombuffer(raw, dtype="<f8").astype(DTYPE).reshape(shape)


def save_tensor(path, x: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, x)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


# --------------------------------------------------------------------------

class Rng:
    """Named, reproducible random stream.

    Draws come from numpy's Philox-4x64 counter-based generator keyed by
    ``seed + 2**64 * h`` where ``h`` is the first 8 bytes (little-endian) of
    ``sha256(stream)``. Equal ``(seed, stream)`` pairs give identical draws on
    every platform; :meth:`child` derives an independent sub-stream.
    """

    def __init__(self, seed: int, stream: str = "root"):
        if not 0 <= int(seed) < 2**64:
            raise DomainError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.stream = stream
        h = int.from_bytes(hashlib.sha256(stream.encode("utf-8")).digest()[:8], "little")
        self.generator = np.random.Generator(np.random.Philox(key=self.seed + (h << 64)))

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream={self.stream!r})"

    def child(self, *labels) -> "Rng":
        return Rng(self.seed, "/".join([self.stream, *map(str, labels)]))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def random(self, size=None):
        return self.generator.random(size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)
