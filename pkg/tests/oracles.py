"""Brute-force reference implementations used only by the tests.

Nothing here calls into the package; these are slow, obvious loops.
"""
import math

import numpy as np


def naive_matmul(a, b):
    m, k = len(a), len(a[0])
    n = len(b[0])
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i][t] * b[t][j]
            out[i][j] = s
    return np.array(out)


def direct_conv(x, w, b, pad):
    """Cross-correlation of one ``[H, W, C]`` image by nested loops (no activation)."""
    h, wd, c = x.shape
    k, _, cin, cout = w.shape
    ho, wo = h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    out = np.zeros((ho, wo, cout))
    for oy in range(ho):
        for ox in range(wo):
            for co in range(cout):
                s = b[co]
                for ky in range(k):
                    for kx in range(k):
                        iy, ix = oy + ky - pad, ox + kx - pad
                        if 0 <= iy < h and 0 <= ix < wd:
                            for ci in range(cin):
                                s += x[iy, ix, ci] * w[ky, kx, ci, co]
                out[oy, ox, co] = s
    return out


def patches(x, k, pad, stride):
    """Receptive fields of ``[H, W, C]`` extracted one by one, flattened ``(ky, kx, c)``."""
    h, w, c = x.shape
    xp = np.zeros((h + 2 * pad, w + 2 * pad, c))
    xp[pad:pad + h, pad:pad + w] = x
    rows = []
    for oy in range(0, h + 2 * pad - k + 1, stride):
        for ox in range(0, w + 2 * pad - k + 1, stride):
            rows.append([xp[oy + ky, ox + kx, ch] for ky in range(k) for kx in range(k) for ch in range(c)])
    return np.array(rows)


def pairwise_auc(scores, bits):
    pos = [s for s, b in zip(scores, bits) if b]
    neg = [s for s, b in zip(scores, bits) if not b]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def confusion_by_counting(probs, labels):
    c = len(probs[0])
    table = [[0] * c for _ in range(c)]
    for prow, lrow in zip(probs, labels):
        pred = max(range(c), key=lambda j: (prow[j], -j))
        true = list(lrow).index(1.0)
        table[true][pred] += 1
    return table


def softmax_mp(row):
    import mpmath

    mpmath.mp.dps = 50
    e = [mpmath.e ** mpmath.mpf(float(v)) for v in row]
    s = sum(e)
    return [float(v / s) for v in e]


def two_pass_stats(images):
    vals = [[], [], []]
    for img in images:
        for ch in range(3):
            vals[ch].extend(float(v) for v in np.ravel(img[..., ch]))
    means, stds = [], []
    for ch in range(3):
        m = math.fsum(vals[ch]) / len(vals[ch])
        var = math.fsum((v - m) ** 2 for v in vals[ch]) / len(vals[ch])
        means.append(m)
        stds.append(math.sqrt(var))
    return means, stds


def central_difference(f, x, eps=1e-5):
    """Gradient of scalar ``f`` at array ``x`` (modified in place and restored)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + eps
        fp = f()
        x[i] = orig - eps
        fm = f()
        x[i] = orig
        grad[i] = (fp - fm) / (2 * eps)
    return grad


def max_rel_error(analytic, numeric):
    a, n = np.asarray(analytic), np.asarray(numeric)
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), 1e-8)))
