"""Posterior ensembles and Bayesian prediction.

Three kinds of approximate posterior are supported:

``sgld-snapshots``
    the last parameter vectors visited by (DP-)SGLD, kept in a ring buffer;
``bbp-variational``
    a factorised Gaussian ``q(w | mu, rho)``; every draw samples fresh weights;
``mc-dropout``
    a trained network whose hidden units are dropped at random per draw.

Each draw produces a :class:`PredictiveSample` for every input row.  For a
regression head the per-draw outputs are ``(y_hat, var)`` with
``var = exp(log_var)`` clipped to ``[1e-12, 1e12]``, and
:func:`decompose_uncertainty` splits the predictive spread into a data
(aleatoric) part, the mean of ``var``, and a posterior (epistemic) part, the
unbiased sample variance of ``y_hat``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.special import softmax

from .dp_optim import VariationalParams, sample_dropout_masks
from .errors import DomainError, ShapeError, StateError
from .nn_core import Network, forward

KINDS = ("sgld-snapshots", "bbp-variational", "mc-dropout")
VAR_FLOOR, VAR_CEIL = 1e-12, 1e12


class SnapshotTrail:
    """Ring buffer holding the most recent ``capacity`` parameter vectors."""

    def __init__(self, capacity: int = 100):
        if capacity < 1:
            raise DomainError("snapshot capacity must be positive")
        self.capacity = int(capacity)
        self._buf = deque(maxlen=self.capacity)

    def push(self, params):
        self._buf.append(np.array(params, dtype=np.float64, copy=True))

    def clear(self):
        self._buf.clear()

    def __len__(self):
        return len(self._buf)

    def snapshots(self):
        """Stored vectors, oldest first."""
        return list(self._buf)


@dataclass(frozen=True)
class PredictiveSample:
    """One posterior draw evaluated on ``m`` inputs.

    Classification fills ``probs`` (``m x K``); regression fills ``mean`` and
    ``var`` (length ``m``).
    """

    probs: np.ndarray = None
    mean: np.ndarray = None
    var: np.ndarray = None

    @property
    def is_regression(self) -> bool:
        return self.mean is not None


@dataclass(frozen=True)
class PosteriorEnsemble:
    """An approximate posterior over the weights of ``net``'s architecture.

    Use :meth:`from_snapshots`, :meth:`from_variational` or
    :meth:`from_dropout` rather than the raw constructor.
    """

    kind: str
    net: Network
    snapshots: tuple = ()
    variational: VariationalParams = None
    rate: float = 0.0
    K: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown ensemble kind {self.kind!r}")
        if self.K < 1:
            raise DomainError("ensemble size must be at least 1")

    @classmethod
    def from_snapshots(cls, net: Network, snapshots, K=None) -> "PosteriorEnsemble":
        snaps = tuple(np.array(s, dtype=np.float64) for s in snapshots)
        for s in snaps:
            if s.shape != (net.d,):
                raise ShapeError(f"snapshot of shape {s.shape} does not match d={net.d}")
        return cls("sgld-snapshots", net, snaps, K=K or max(len(snaps), 1))

    @classmethod
    def from_variational(cls, net: Network, vp: VariationalParams, K: int = 100) -> "PosteriorEnsemble":
        if vp.mu.shape != (net.d,):
            raise ShapeError("variational parameters do not match the architecture")
        return cls("bbp-variational", net, variational=vp, K=K)

    @classmethod
    def from_dropout(cls, net: Network, rate: float = 0.5, K: int = 100) -> "PosteriorEnsemble":
        if not 0.0 <= rate < 1.0:
            raise DomainError("dropout rate must lie in [0, 1)")
        return cls("mc-dropout", net, rate=rate, K=K)

    def __len__(self):
        if self.kind == "sgld-snapshots":
            return len(self.snapshots)
        return self.K

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "sizes": list(self.net.sizes), "head": self.net.head, "K": self.K}
        if self.kind == "sgld-snapshots":
            out["snapshots"] = [s.tolist() for s in self.snapshots]
        elif self.kind == "bbp-variational":
            out["mu"] = self.variational.mu.tolist()
            out["rho"] = self.variational.rho.tolist()
        else:
            out["params"] = self.net.params.tolist()
            out["rate"] = self.rate
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "PosteriorEnsemble":
        net = Network(d["sizes"], d["head"], d.get("params"))
        if d["kind"] == "sgld-snapshots":
            return cls.from_snapshots(net, d["snapshots"], d["K"])
        if d["kind"] == "bbp-variational":
            return cls.from_variational(net, VariationalParams(d["mu"], d["rho"]), d["K"])
        return cls.from_dropout(net, d["rate"], d["K"])


def _to_sample(head, out):
    if head == "classification":
        return PredictiveSample(probs=softmax(out, axis=1))
    var = np.clip(np.exp(np.clip(out[:, 1], -700, 700)), VAR_FLOOR, VAR_CEIL)
    return PredictiveSample(mean=out[:, 0].copy(), var=var)


def sample_predictions(ens: PosteriorEnsemble, inputs, K: int = None, rng=None):
    """Evaluate ``K`` posterior draws on ``inputs``.

    Snapshot ensembles use the first ``K`` stored vectors in storage order and
    need no randomness; the other kinds draw from ``rng``.  Returns a list of
    :class:`PredictiveSample` in draw order.
    """
    K = ens.K if K is None else int(K)
    if K < 1:
        raise DomainError("need at least one draw")
    net = ens.net
    if ens.kind == "sgld-snapshots":
        if len(ens.snapshots) == 0:
            raise StateError("snapshot ensemble is empty")
        if K > len(ens.snapshots):
            raise DomainError(f"asked for {K} draws but only {len(ens.snapshots)} snapshots are stored")
        return [_to_sample(net.head, forward(net, inputs, params=w)) for w in ens.snapshots[:K]]
    rng = np.random.default_rng(rng)
    out = []
    for _ in range(K):
        if ens.kind == "bbp-variational":
            raw = forward(net, inputs, params=ens.variational.sample(rng))
        else:
            masks = sample_dropout_masks(net, ens.rate, rng)
            raw = forward(net, inputs, masks=masks)
        out.append(_to_sample(net.head, raw))
    return out


def predictive_mean_probs(samples) -> np.ndarray:
    """Average class probabilities over draws, ``m x K``."""
    if not samples:
        raise StateError("no predictive samples")
    return np.mean([s.probs for s in samples], axis=0)


def decompose_uncertainty(samples):
    """Split regression draws into ``(data_unc, posterior_unc, mean_pred)``.

    With ``S`` draws of ``(y_hat_s, var_s)`` per input::

        data_unc      = (1 / S) * sum_s var_s
        posterior_unc = (1 / (S - 1)) * sum_s (y_hat_s - mean_pred)^2
        mean_pred     = (1 / S) * sum_s y_hat_s

    Each is an array over inputs.  Fewer than two draws leave the posterior
    part undefined and raise :class:`DomainError`.
    """
    samples = list(samples)
    if not samples or not all(s.is_regression for s in samples):
        raise DomainError("need regression predictive samples")
    if len(samples) < 2:
        raise DomainError("posterior uncertainty needs at least two draws")
    y = np.array([np.atleast_1d(s.mean) for s in samples], dtype=np.float64)
    v = np.array([np.atleast_1d(s.var) for s in samples], dtype=np.float64)
    # deviations from the first draw: exact zero spread for identical draws
    dev = y - y[0]
    S = len(samples)
    post = (np.sum(dev**2, axis=0) - np.sum(dev, axis=0) ** 2 / S) / (S - 1)
    return v.mean(axis=0), np.maximum(post, 0.0), y[0] + dev.mean(axis=0)


def prediction_histogram(samples, bins: int = 10, row: int = 0) -> np.ndarray:
    """Per-class histogram of predicted probability for input ``row``.

    Returns a ``K x bins`` count table.  Bins are right-closed,
    ``((j - 1) / bins, j / bins]``, except that 0 falls in the first bin;
    so probability 1 lands in the top bin.
    """
    if bins < 2:
        raise DomainError("need at least two bins")
    if not samples:
        raise StateError("no predictive samples")
    p = np.array([s.probs[row] for s in samples])
    idx = np.clip(np.ceil(p * bins).astype(np.int64) - 1, 0, bins - 1)
    table = np.zeros((p.shape[1], bins), dtype=np.int64)
    for k in range(p.shape[1]):
        table[k] = np.bincount(idx[:, k], minlength=bins)
    return table
