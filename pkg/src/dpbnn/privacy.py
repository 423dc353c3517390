"""Closed-form Gaussian-DP accounting.

For DP-SGD-type optimisers (including DP-BBP and DP-MC Dropout)::

    mu = sqrt(T * (exp(1 / sigma^2) - 1)) * |B| / n

DP-SGLD is DP-SGD with ``sigma = |B| / (n C sqrt(eta))``, which gives::

    mu = sqrt(T * (exp(n^2 eta C^2 / |B|^2) - 1)) * |B| / n

A ``mu``-GDP mechanism is ``(eps, delta)``-DP for every ``eps >= 0`` with::

    delta(eps; mu) = Phi(-eps/mu + mu/2) - exp(eps) * Phi(-eps/mu - mu/2)

The sampling ratio is taken as ``|B| / n`` for fixed-size uniform batches,
mirroring the Poisson-subsampling formula above.

Reference values (MNIST, 15 epochs, ``|B| = 256``, ``delta = 1e-5``): the
moments accountant gives ``eps = 0.955`` for ``sigma = 1.3`` and ``0.989``
for DP-SGLD with ``eta = 5e-6, C = 1.5``.  They are not computed here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq
from scipy.special import log_ndtr, ndtr

from .errors import DomainError

EPS_UPPER = 200.0


@dataclass(frozen=True)
class PrivacyBudget:
    mu: float
    eps: float
    delta: float

    def as_dict(self):
        return {"mu": self.mu, "eps": self.eps, "delta": self.delta}


def _check_common(T, batch_size, n):
    if T < 0:
        raise DomainError("iteration count must be non-negative")
    if not 1 <= batch_size <= n:
        raise DomainError(f"need 1 <= batch_size <= n, got {batch_size}, {n}")


def gdp_mu_generic(T: int, sigma: float, batch_size: int, n: int) -> float:
    """GDP parameter of ``T`` noisy steps with noise multiplier ``sigma``.

    Returns ``math.inf`` when ``sigma = 0`` (no privacy).
    """
    _check_common(T, batch_size, n)
    if sigma < 0:
        raise DomainError("noise multiplier must be non-negative")
    if T == 0:
        return 0.0
    if sigma == 0:
        return math.inf
    return math.sqrt(T * math.expm1(sigma**-2)) * batch_size / n


def sgld_exponent(eta: float, C: float, batch_size: int, n: int) -> float:
    """``n^2 eta C^2 / |B|^2``, i.e. ``1 / sigma^2`` of the equivalent DP-SGD."""
    return (n * C / batch_size) ** 2 * eta


def gdp_mu_sgld(T: int, eta: float, C: float, batch_size: int, n: int) -> float:
    """GDP parameter of ``T`` DP-SGLD steps with learning rate ``eta``, clip ``C``."""
    _check_common(T, batch_size, n)
    if eta < 0 or C < 0:
        raise DomainError("learning rate and clipping norm must be non-negative")
    if math.isinf(C):
        return math.inf if T > 0 and eta > 0 else 0.0
    a = sgld_exponent(eta, C, batch_size, n)
    if a > 700:  # expm1 overflows; the log form saturates to inf instead
        log_mu = log_gdp_mu_sgld(T, eta, C, batch_size, n)
        return math.exp(log_mu) if log_mu < 709.0 else math.inf
    return math.sqrt(T * math.expm1(a)) * batch_size / n


def _log_expm1(v):
    return v + math.log1p(-math.exp(-v)) if v > 1.0 else math.log(math.expm1(v))


def log_gdp_mu_sgld(T: int, eta: float, C: float, batch_size: int, n: int) -> float:
    """``log`` of :func:`gdp_mu_sgld`, finite even when ``mu`` overflows."""
    _check_common(T, batch_size, n)
    v = sgld_exponent(eta, C, batch_size, n)
    if T == 0 or v == 0:
        return -math.inf
    return 0.5 * (math.log(T) + _log_expm1(v)) + math.log(batch_size / n)


def delta_from_mu_eps(eps: float, mu: float) -> float:
    """Smallest ``delta`` such that ``mu``-GDP implies ``(eps, delta)``-DP.

    The second term is evaluated as ``exp(eps + log Phi(.))`` so large ``eps``
    does not overflow.
    """
    if mu < 0 or eps < 0:
        raise DomainError("mu and eps must be non-negative")
    if mu == 0:
        return 0.0
    if math.isinf(mu):
        return 1.0
    # scipy's ndtr is Cephes' 0.5 * erfc(-x / sqrt(2)); log_ndtr switches to
    # an asymptotic series in the far tail
    a = -eps / mu + mu / 2
    b = -eps / mu - mu / 2
    delta = float(ndtr(a) - np.exp(eps + log_ndtr(b)))
    return min(max(delta, 0.0), 1.0)


def eps_from_mu_delta(mu: float, delta: float, tol: float = 1e-12) -> float:
    """Smallest ``eps`` in ``[0, 200]`` with ``delta(eps; mu) <= delta``.

    ``delta(eps; mu)`` is decreasing in ``eps``, so the root is bracketed and
    found by Brent's method to absolute tolerance ``tol``.
    """
    if not 0 < delta < 1:
        raise DomainError("delta must lie in (0, 1)")
    if mu < 0:
        raise DomainError("mu must be non-negative")
    if mu == 0 or delta_from_mu_eps(0.0, mu) <= delta:
        return 0.0
    if math.isinf(mu):
        return math.inf
    if delta_from_mu_eps(EPS_UPPER, mu) > delta:
        raise DomainError(f"delta={delta} is not reachable with eps <= {EPS_UPPER} at mu={mu}")
    return brentq(lambda e: delta_from_mu_eps(e, mu) - delta, 0.0, EPS_UPPER, xtol=tol, rtol=4 * np.finfo(float).eps)


def eps_or_inf(mu: float, delta: float) -> float:
    """``eps_from_mu_delta`` that reports an unreachable ``delta`` as ``inf``."""
    try:
        return eps_from_mu_delta(mu, delta)
    except DomainError:
        return math.inf


def budget(mu: float, delta: float = 1e-5) -> PrivacyBudget:
    return PrivacyBudget(mu, eps_from_mu_delta(mu, delta), delta)


def iterations(epochs: int, n: int, batch_size: int) -> int:
    """Steps in ``epochs`` passes: ``ceil(n / |B|)`` per epoch."""
    return int(epochs) * math.ceil(n / batch_size)


def mu_monotone_in_batch(T: int, eta: float, C: float, n: int, batch_sizes):
    """DP-SGLD ``mu`` over increasing batch sizes, and whether it never increases.

    Larger batches give a smaller DP-SGLD ``mu``, the opposite of DP-SGD.
    Returns ``(is_nonincreasing, mus)``.
    """
    sizes = list(batch_sizes)
    if any(b2 < b1 for b1, b2 in zip(sizes, sizes[1:])):
        raise DomainError("batch sizes must be non-decreasing")
    log_mus = np.array([log_gdp_mu_sgld(T, eta, C, b, n) for b in sizes])
    with np.errstate(invalid="ignore"):
        steps = np.diff(log_mus)
    ok = bool(np.all((steps <= 0) | (log_mus[1:] == log_mus[:-1])))
    with np.errstate(over="ignore"):  # mu beyond float range is reported as inf
        return ok, np.exp(log_mus)
