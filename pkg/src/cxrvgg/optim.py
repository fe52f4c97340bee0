"""Categorical cross-entropy and the Adam optimizer."""
from __future__ import annotations

from typing import Dict

import numpy as np

from .errors import DimensionError, DomainError
from .tensor import DTYPE

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

PROB_FLOOR = 1e-12


def cross_entropy(probs, labels):
    """Mean categorical cross-entropy of softmax outputs against one-hot labels.

    Returns ``(loss, dlogits)`` where ``dlogits = (probs - labels) / N`` is the
    gradient with respect to the pre-softmax logits. Probabilities are floored
    at 1e-12 before the log.
    """
    probs = np.asarray(probs, dtype=DTYPE)
    labels = np.asarray(labels, dtype=DTYPE)
    if probs.shape != labels.shape or probs.ndim != 2:
        raise DimensionError(f"probs {probs.shape} and labels {labels.shape} must be equal [N, c]")
    n = probs.shape[0]
    if n == 0:
        raise DomainError("cross-entropy of an empty batch")
    if np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6):
        raise DomainError("probability rows must sum to 1")
    if np.any(np.abs(labels.sum(axis=1) - 1.0) > 0) or np.any((labels != 0) & (labels != 1)):
        raise DomainError("labels must be one-hot rows")
    true_prob = np.sum(probs * labels, axis=1)
    loss = float(-np.mean(np.log(np.maximum(true_prob, PROB_FLOOR))))
    return loss, (probs - labels) / n


class Adam:
    """Adam with bias-corrected moments.

    ``m <- b1 m + (1-b1) g``, ``v <- b2 v + (1-b2) g^2``,
    ``theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)``.
    Moments are keyed by parameter name and created on first use.
    """

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise DomainError(f"learning rate must be positive, got {lr}")
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1) or eps <= 0:
            raise DomainError("require 0 <= beta1, beta2 < 1 and eps > 0")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self._buf = np.empty(0, dtype=DTYPE)

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        """Apply one update in place, iterating ``params`` in insertion order."""
        for key, p in params.items():
            g = grads.get(key)
            if g is None or np.shape(g) != p.shape:
                raise DimensionError(f"gradient for {key!r} has shape {np.shape(g)}, parameter {p.shape}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for key, p in params.items():
            g = grads[key]
            if key not in self.m:
                self.m[key] = np.zeros_like(p)
                self.v[key] = np.zeros_like(p)
            m, v = self.m[key], self.v[key]
            if m.shape != p.shape:
                raise DimensionError(f"moment shape {m.shape} does not match parameter {key!r} {p.shape}")
            if _adam_kernel is not None and p.flags.c_contiguous and m.flags.c_contiguous:
                _adam_kernel(p.reshape(-1), np.ascontiguousarray(g, dtype=DTYPE).reshape(-1), m.reshape(-1),
                             v.reshape(-1), self.beta1, self.beta2, c1, c2, self.lr, self.eps)
            else:
                _adam_numpy(p, g, m, v, self.beta1, self.beta2, c1, c2, self.lr, self.eps, self._scratch(p))
        return params

    def _scratch(self, p):
        if self._buf.size < p.size:
            self._buf = np.empty(p.size, dtype=DTYPE)
        return self._buf[: p.size].reshape(p.shape)


def _adam_numpy(p, g, m, v, beta1, beta2, c1, c2, lr, eps, tmp):
    np.multiply(g, 1.0 - beta1, out=tmp)
    m *= beta1
    m += tmp
    np.square(g, out=tmp)
    tmp *= 1.0 - beta2
    v *= beta2
    v += tmp
    np.divide(v, c2, out=tmp)
    np.sqrt(tmp, out=tmp)
    tmp += eps
    np.divide(m, tmp, out=tmp)
    tmp *= lr / c1
    p -= tmp


def _adam_loop(p, g, m, v, beta1, beta2, c1, c2, lr, eps):
    # one fused pass, same arithmetic as _adam_numpy
    for i in range(p.size):
        gi = g[i]
        mi = beta1 * m[i] + (1.0 - beta1) * gi
        vi = beta2 * v[i] + (1.0 - beta2) * (gi * gi)
        m[i] = mi
        v[i] = vi
        p[i] -= (lr / c1) * (mi / (np.sqrt(vi / c2) + eps))


_adam_kernel = numba.njit(cache=True)(_adam_loop) if numba is not None else None
