"""Confidence, expected/maximum calibration error and reliability-diagram bins.

Samples are grouped by confidence into ``M`` equal-width bins over ``[0, 1]``::

    ECE = sum_m |B_m| / n * |acc(B_m) - conf(B_m)|
    MCE = max_m |acc(B_m) - conf(B_m)|

A confidence on an interior edge ``m / M`` goes to the upper bin and a
confidence of exactly 1 goes to the top bin.  Empty bins add nothing to ECE
and are left out of the MCE maximum (MCE is 0 if every bin is empty, which
cannot happen for ``n >= 1``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_BINS = 15
SUM_TOLERANCE = 1e-6


@dataclass(frozen=True)
class CalibrationBin:
    lower: float
    upper: float
    count: int
    accuracy: float
    confidence: float

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.lower + self.upper)


@dataclass(frozen=True)
class CalibrationReport:
    """Per-bin statistics with ECE and MCE.

    Empty bins report ``accuracy = confidence = 0`` and are skipped by MCE.
    """

    bins: tuple
    ece: float
    mce: float
    n: int

    def as_rows(self):
        """Rows ``(lower, upper, midpoint, count, accuracy, confidence)``."""
        return [(b.lower, b.upper, b.midpoint, b.count, b.accuracy, b.confidence) for b in self.bins]

    def summary(self) -> str:
        lines = [f"n = {self.n}", f"bins = {len(self.bins)}", f"ECE = {self.ece:.6f}", f"MCE = {self.mce:.6f}"]
        lines.append("empty bins are excluded from the MCE maximum")
        return "\n".join(lines)


def _check_probs(probs):
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    if p.ndim != 2 or p.shape[1] < 1:
        raise ValueError("probabilities must be a vector or an (n, K) matrix")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("probabilities must be finite and non-negative")
    dev = np.abs(p.sum(axis=1) - 1.0)
    if np.any(dev > SUM_TOLERANCE):
        i = int(np.argmax(dev))
        raise ValueError(f"row {i} sums to {p[i].sum():.9g}, not 1")
    return p


def confidence_and_prediction(prob_vector):
    """Return ``(max_k p_k, argmax_k p_k)``; ties go to the lowest index."""
    p = _check_probs(prob_vector)
    if p.shape[0] != 1:
        raise ValueError("expected a single probability vector")
    k = int(np.argmax(p[0]))
    return float(p[0, k]), k


def bin_index(conf, M: int) -> np.ndarray:
    """Bin of each confidence: ``floor(conf * M)`` capped at ``M - 1``."""
    conf = np.asarray(conf, dtype=np.float64)
    return np.minimum(np.floor(conf * M).astype(np.int64), M - 1)


def calibration_report(probs, labels, M: int = DEFAULT_BINS) -> CalibrationReport:
    """ECE, MCE and per-bin ``(count, accuracy, confidence)`` for ``n x K`` probabilities."""
    if M < 1:
        raise ValueError("need at least one bin")
    p = _check_probs(probs)
    y = np.asarray(labels)
    n, K = p.shape
    if len(y) != n or n == 0:
        raise ValueError("need one label per row and at least one row")
    if np.any(y < 0) or np.any(y >= K) or not np.all(y == np.round(y)):
        raise ValueError(f"labels must be integers in [0, {K})")
    y = y.astype(np.int64)
    pred = np.argmax(p, axis=1)
    conf = p[np.arange(n), pred]
    correct = (pred == y).astype(np.float64)
    idx = bin_index(conf, M)
    counts = np.bincount(idx, minlength=M)
    acc_sum = np.bincount(idx, weights=correct, minlength=M)
    conf_sum = np.bincount(idx, weights=conf, minlength=M)
    nonempty = counts > 0
    acc = np.divide(acc_sum, counts, out=np.zeros(M), where=nonempty)
    cnf = np.divide(conf_sum, counts, out=np.zeros(M), where=nonempty)
    gap = np.abs(acc - cnf)
    ece = float(np.sum(counts / n * gap))
    mce = float(gap[nonempty].max()) if nonempty.any() else 0.0
    edges = np.linspace(0.0, 1.0, M + 1)
    bins = tuple(
        CalibrationBin(float(edges[m]), float(edges[m + 1]), int(counts[m]), float(acc[m]), float(cnf[m]))
        for m in range(M)
    )
    return CalibrationReport(bins, ece, mce, n)


def confidence_histogram(probs, M: int = DEFAULT_BINS) -> np.ndarray:
    """Counts of predicted-class confidence per bin."""
    p = _check_probs(probs)
    return np.bincount(bin_index(p.max(axis=1), M), minlength=M)
