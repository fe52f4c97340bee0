"""Classification metrics and cross-fold aggregation.

Per split: loss, accuracy, flat AUC and per-class recall. Across folds each
metric is summarised by its mean and a two-sided Student-t interval
``mean +/- t_{(1+level)/2, n-1} * s / sqrt(n)`` with ``s`` the sample std.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DomainError
from .optim import cross_entropy
from .tensor import DTYPE

DEFAULT_CLASSES = ("COVID-19", "No Finding", "Other Pneumonia")
SPLITS = ("internal", "external")


@dataclass
class EvalResult:
    loss: float
    accuracy: float
    flat_auc: float
    recall: Dict[str, float]
    n: int
    confusion: List[List[int]] = field(default_factory=list)

    def metric(self, row: str) -> Optional[float]:
        """Value for a table row label (``"Loss"``, ``"COVID-19 Recall"``, ...)."""
        if row == "Loss":
            return self.loss
        if row == "Accuracy":
            return self.accuracy
        if row == "Flat AUC":
            return self.flat_auc
        if row.endswith(" Recall"):
            return self.recall.get(row[: -len(" Recall")])
        raise KeyError(row)

    def to_dict(self) -> dict:
        return {"loss": self.loss, "accuracy": self.accuracy, "flat_auc": self.flat_auc,
                "recall": dict(self.recall), "n": self.n, "confusion": self.confusion}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalResult":
        return cls(d["loss"], d["accuracy"], d["flat_auc"], dict(d["recall"]), d["n"], d.get("confusion", []))


def confusion_matrix(probs, labels) -> np.ndarray:
    """Rows are true classes, columns predicted (argmax, ties to the lowest index)."""
    probs = np.asarray(probs, dtype=DTYPE)
    labels = np.asarray(labels, dtype=DTYPE)
    c = probs.shape[1]
    table = np.zeros((c, c), dtype=int)
    np.add.at(table, (labels.argmax(axis=1), probs.argmax(axis=1)), 1)
    return table


def evaluate(probs, labels, class_names: Sequence[str] = DEFAULT_CLASSES) -> EvalResult:
    probs = np.asarray(probs, dtype=DTYPE)
    labels = np.asarray(labels, dtype=DTYPE)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise DomainError("cannot evaluate an empty set")
    if len(class_names) != probs.shape[1]:
        raise DomainError(f"{len(class_names)} class names for {probs.shape[1]} columns")
    loss, _ = cross_entropy(probs, labels)
    table = confusion_matrix(probs, labels)
    n = int(table.sum())
    support = table.sum(axis=1)
    recall = {name: float(table[i, i] / support[i]) for i, name in enumerate(class_names) if support[i] > 0}
    return EvalResult(
        loss=loss,
        accuracy=float(np.trace(table) / n),
        flat_auc=flat_auc(probs, labels),
        recall=recall,
        n=n,
        confusion=table.tolist(),
    )


def average_ranks(values) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their positions."""
    values = np.asarray(values, dtype=DTYPE)
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    ranks = np.empty(len(values), dtype=DTYPE)
    # boundaries of runs of equal values
    starts = np.flatnonzero(np.r_[True, sorted_vals[1:] != sorted_vals[:-1]])
    ends = np.r_[starts[1:], len(values)]
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = (s + 1 + e) / 2.0
    return ranks


def binary_auc(scores, bits) -> float:
    """Mann-Whitney AUC: P(positive outscores negative) + P(tie) / 2."""
    scores = np.asarray(scores, dtype=DTYPE).ravel()
    bits = np.asarray(bits).ravel().astype(bool)
    n_pos = int(bits.sum())
    n_neg = bits.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DomainError("AUC needs at least one positive and one negative")
    ranks = average_ranks(scores)
    u = ranks[bits].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def flat_auc(probs, labels) -> float:
    """AUC over every (label bit, predicted probability) pair of the flattened ``[N, c]`` arrays."""
    return binary_auc(np.ravel(probs), np.ravel(labels) > 0.5)


# --------------------------------------------------------------------------
# Student t quantiles

def _betacf(a, b, x):
    # continued fraction for the incomplete beta (modified Lentz)
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, 500):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            break
    return h


def betainc(a: float, b: float, x: float) -> float:
    """Regularised incomplete beta function ``I_x(a, b)``."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    front = math.exp(math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_cdf(t: float, dof: float) -> float:
    tail = 0.5 * betainc(dof / 2.0, 0.5, dof / (dof + t * t))
    return 1.0 - tail if t >= 0 else tail


def t_ppf(q: float, dof: float) -> float:
    """Inverse CDF of Student's t with ``dof`` degrees of freedom (bisection on :func:`t_cdf`)."""
    if not 0.0 < q < 1.0:
        raise DomainError(f"quantile must lie in (0, 1), got {q}")
    if dof <= 0:
        raise DomainError(f"degrees of freedom must be positive, got {dof}")
    if q == 0.5:
        return 0.0
    if q < 0.5:
        return -t_ppf(1.0 - q, dof)
    lo, hi = 0.0, 1.0
    while t_cdf(hi, dof) < q:
        lo, hi = hi, hi * 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if t_cdf(mid, dof) < q:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-14 * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


def t_confidence_interval(values: Sequence[float], level: float = 0.95) -> Tuple[float, float, float]:
    """``(low, mean, high)`` of the two-sided t interval for the mean."""
    values = np.asarray(values, dtype=DTYPE)
    n = values.size
    if n < 2:
        raise DomainError(f"need at least 2 values for a confidence interval, got {n}")
    if not 0.0 < level < 1.0:
        raise DomainError(f"confidence level must lie in (0, 1), got {level}")
    mean = float(values.mean())
    s = float(values.std(ddof=1))
    half = t_ppf(0.5 + level / 2.0, n - 1) * s / math.sqrt(n)
    return mean - half, mean, mean + half


# --------------------------------------------------------------------------
# cross-fold summary

@dataclass
class MetricSummary:
    values: List[float]
    mean: float
    std: float
    low: float
    high: float

    @property
    def half_width(self) -> float:
        return self.high - self.mean

    @classmethod
    def from_values(cls, values, level: float = 0.95) -> "MetricSummary":
        values = [float(v) for v in values]
        low, mean, high = t_confidence_interval(values, level)
        return cls(values, mean, float(np.std(values, ddof=1)), low, high)

    def to_dict(self) -> dict:
        return {"values": self.values, "mean": self.mean, "std": self.std, "low": self.low, "high": self.high}


def metric_rows(class_names: Sequence[str] = DEFAULT_CLASSES) -> List[str]:
    return ["Loss", "Accuracy", "Flat AUC"] + [f"{name} Recall" for name in class_names]


@dataclass
class CVSummary:
    folds: List[Tuple[EvalResult, EvalResult]]
    stats: Dict[str, Dict[str, MetricSummary]]
    class_names: Tuple[str, ...] = DEFAULT_CLASSES
    level: float = 0.95
    meta: dict = field(default_factory=dict)

    @property
    def rows(self) -> List[str]:
        return metric_rows(self.class_names)

    def get(self, split: str, row: str) -> MetricSummary:
        return self.stats[split][row]

    def to_dict(self) -> dict:
        return {
            "class_names": list(self.class_names),
            "level": self.level,
            "meta": self.meta,
            "folds": [{"internal": tr.to_dict(), "external": te.to_dict()} for tr, te in self.folds],
            "summary": {split: {row: ms.to_dict() for row, ms in rows.items()} for split, rows in self.stats.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CVSummary":
        folds = [(EvalResult.from_dict(f["internal"]), EvalResult.from_dict(f["external"])) for f in d["folds"]]
        stats = {split: {row: MetricSummary(**ms) for row, ms in rows.items()} for split, rows in d["summary"].items()}
        return cls(folds, stats, tuple(d["class_names"]), d["level"], d.get("meta", {}))

    def csv_rows(self, digits: Optional[int] = 3) -> List[List[str]]:
        """``metric, lhs95, value, rhs95, split`` rows, internal block first."""
        fmt = (lambda x: round_half_even(x, digits)) if digits is not None else repr
        out = [["metric", "lhs95", "value", "rhs95", "split"]]
        for split in SPLITS:
            for row in self.rows:
                ms = self.stats[split].get(row)
                if ms is None:
                    out.append([row, "", "", "", split])
                else:
                    out.append([row, fmt(ms.low), fmt(ms.mean), fmt(ms.high), split])
        return out

    def to_csv(self, digits: Optional[int] = 3) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(self.csv_rows(digits))
        return buf.getvalue()


def summarize(folds: Sequence[Tuple[EvalResult, EvalResult]], k: Optional[int] = 5,
              level: float = 0.95, class_names: Sequence[str] = DEFAULT_CLASSES) -> CVSummary:
    """Mean, sample std and t interval of every metric over folds, per split."""
    folds = list(folds)
    if k is not None and len(folds) != k:
        raise DomainError(f"expected {k} fold results, got {len(folds)}")
    if len(folds) < 2:
        raise DomainError("need at least 2 folds to summarise")
    stats: Dict[str, Dict[str, MetricSummary]] = {}
    for s, split in enumerate(SPLITS):
        stats[split] = {}
        for row in metric_rows(class_names):
            vals = [f[s].metric(row) for f in folds]
            vals = [v for v in vals if v is not None]
            if len(vals) >= 2:
                stats[split][row] = MetricSummary.from_values(vals, level)
    return CVSummary(folds, stats, tuple(class_names), level)


# --------------------------------------------------------------------------
# number formatting

def round_half_even(x: float, digits: int = 3) -> str:
    """Decimal rendering rounded half-to-even on the shortest repr of ``x``."""
    q = Decimal(1).scaleb(-digits)
    d = Decimal(repr(float(x))).quantize(q, rounding=ROUND_HALF_EVEN)
    if d == 0:
        d = abs(d)
    return f"{d:.{digits}f}"


def percent(x: float, digits: int = 1) -> str:
    q = Decimal(1).scaleb(-digits)
    d = (Decimal(repr(float(x))) * 100).quantize(q, rounding=ROUND_HALF_EVEN)
    if d == 0:
        d = abs(d)
    return f"{d:.{digits}f}"


def format_pm(mean: float, half_width: float) -> str:
    """``93.9(±3.4)%`` style cell."""
    return f"{percent(mean)}(±{percent(half_width)})%"


def format_interval(mean: float, low: float, high: float) -> str:
    """``93.9_{-3.4}^{+3.4}%`` style cell with separately rounded lower and upper distances."""
    return f"{percent(mean)}_{{-{percent(mean - low)}}}^{{+{percent(high - mean)}}}%"
