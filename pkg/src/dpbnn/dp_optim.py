"""Differentially private training steps for Bayesian and plain networks.

Four steppers share the clip-then-noise core:

* :func:`step_dp_sgd` -- clipped, noised SGD with a prior-derived regulariser.
* :func:`step_dp_sgld` -- Langevin dynamics on clipped gradients; the injected
  ``N(0, eta)`` noise is the only noise, so privacy is set by ``eta`` and ``C``.
* :func:`step_dp_bbp` -- DP-SGD on the variational parameters ``(mu, rho)``
  of a factorised Gaussian, ``sigma = softplus(rho)``.
* :func:`step_dp_mc_dropout` -- DP-SGD on a subnetwork with hidden units dropped.

:func:`map_sgld_to_sgd` and :func:`map_sgd_to_sgld` translate between DP-SGLD
and DP-SGD hyperparameters; under the mapping the two produce the same
trajectory when fed the same standard-normal draws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Union

import numpy as np
from scipy.special import expit

from .errors import DomainError, NumericError, ShapeError
from .nn_core import (
    Network,
    batch_gradient,
    init_network,
    iter_per_sample_chunks,
    mean_loss,
    reweighted_gradient_sum,
)

STABILITY_CONSTANT = 1e-6
CLIP_MODES = ("standard", "stabilized")


@dataclass(frozen=True)
class Prior:
    """Weight prior, used as the regulariser ``r(w) = -log p(w)``.

    ``kind`` is ``"none"`` (non-informative), ``"gaussian"`` (``N(0, scale^2)``,
    an L2 penalty) or ``"laplace"`` (``Laplace(0, scale)``, an L1 penalty).
    """

    kind: str = "none"
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("none", "gaussian", "laplace"):
            raise ValueError(f"unknown prior {self.kind!r}")
        if self.kind != "none" and not self.scale > 0:
            raise DomainError("prior scale must be positive")

    def grad(self, w):
        return prior_grad(w, self)

    def neg_log_density(self, w) -> float:
        """``-log p(w)`` up to an additive constant."""
        w = np.asarray(w, dtype=np.float64)
        if self.kind == "gaussian":
            return float(np.sum(w**2) / (2 * self.scale**2))
        if self.kind == "laplace":
            return float(np.sum(np.abs(w)) / self.scale)
        return 0.0

    def rescaled(self, factor: float) -> "Prior":
        """Prior whose regulariser gradient is divided by ``factor``."""
        if self.kind == "gaussian":
            return Prior("gaussian", self.scale * math.sqrt(factor))
        if self.kind == "laplace":
            return Prior("laplace", self.scale * factor)
        return self


NON_INFORMATIVE = Prior()


def prior_grad(w, prior: Prior) -> np.ndarray:
    """Gradient of ``-log p(w)``: ``0``, ``w / s^2`` or ``sign(w) / s``."""
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise NumericError("non-finite weights passed to prior_grad")
    if prior.kind == "gaussian":
        return w / prior.scale**2
    if prior.kind == "laplace":
        return np.sign(w) / prior.scale
    return np.zeros_like(w)


Schedule = Union[float, Callable[[int], float]]


@dataclass
class DPConfig:
    """Hyperparameters shared by all steppers.

    ``eta`` may be a constant or a callable ``t -> eta_t``.  ``C = inf`` turns
    clipping off; ``sigma = 0`` turns the Gaussian mechanism off (DP-SGLD
    ignores ``sigma`` because its noise scale is tied to ``eta``).
    """

    eta: Schedule
    batch_size: int
    n: int
    C: float = math.inf
    sigma: float = 0.0
    T: int = 0
    prior: Prior = field(default_factory=Prior)
    clip_mode: str = "standard"

    def __post_init__(self):
        if not callable(self.eta) and not self.eta > 0:
            raise DomainError("learning rate must be positive")
        if not self.C > 0:
            raise DomainError("clipping norm must be positive")
        if not self.sigma >= 0:
            raise DomainError("noise multiplier must be non-negative")
        if self.batch_size < 1 or self.n < self.batch_size:
            raise DomainError(f"need 1 <= batch_size <= n, got {self.batch_size}, {self.n}")
        if self.T < 0:
            raise DomainError("iteration count must be non-negative")
        if self.clip_mode not in CLIP_MODES:
            raise ValueError(f"unknown clip mode {self.clip_mode!r}")
        if self.sigma > 0 and math.isinf(self.C):
            raise DomainError("noise multiplier needs a finite clipping norm")

    def eta_at(self, t: int) -> float:
        return float(self.eta(t)) if callable(self.eta) else float(self.eta)

    @property
    def private(self) -> bool:
        return math.isfinite(self.C)


def _clip_factors(norms, C, mode):
    if math.isinf(C):
        return np.ones_like(norms)
    if mode == "stabilized":
        return np.minimum(1.0, C / (norms + STABILITY_CONSTANT))
    with np.errstate(divide="ignore"):
        return np.minimum(1.0, np.where(norms > 0, C / norms, 1.0))


def clip(g, C: float, mode: str = "standard") -> np.ndarray:
    """Scale ``g`` to l2 norm at most ``C``.

    ``standard``: ``min(1, C / ||g||) * g``.  ``stabilized``:
    ``min(1, C / (||g|| + 1e-6)) * g``, which is ``C g / (||g|| + 1e-6)``
    whenever clipping is active.
    """
    if not C > 0:
        raise DomainError("clipping norm must be positive")
    if mode not in CLIP_MODES:
        raise ValueError(f"unknown clip mode {mode!r}")
    g = np.asarray(g, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite gradient passed to clip")
    return g * _clip_factors(np.array(np.linalg.norm(g)), C, mode)


def clip_rows(G, C: float, mode: str = "standard") -> np.ndarray:
    """Clip every row of ``G`` independently."""
    G = np.asarray(G, dtype=np.float64)
    return G * _clip_factors(np.linalg.norm(G, axis=1), C, mode)[:, None]


def clipped_gradient_sum(net: Network, batch, C: float, mode="standard", masks=None):
    """Sum over the batch of clipped per-sample gradients.

    Per-sample gradients are never stored: their norms come from the
    outer-product structure of dense layers (see
    :func:`~dpbnn.nn_core.reweighted_gradient_sum`).  With ``C = inf`` this is
    ``|B|`` times the ordinary batch gradient.  Returns ``(sum, mean_loss)``.
    """
    if math.isinf(C):
        g, loss = batch_gradient(net, batch.inputs, batch.targets, masks)
        return g * len(batch), loss
    total, losses, _ = reweighted_gradient_sum(
        net, batch.inputs, batch.targets, lambda norms: _clip_factors(norms, C, mode), masks
    )
    return total, float(losses.mean())


def _gaussian(rng, d):
    return rng.standard_normal(d)


def _sgd_update(w, clipped_sum, batch_size, cfg, rng, t):
    g_hat = clipped_sum / batch_size
    if cfg.sigma > 0:
        g_hat = g_hat + (cfg.sigma * cfg.C / batch_size) * _gaussian(rng, len(w))
    return w - cfg.eta_at(t) * (g_hat + cfg.prior.grad(w))


def _sgld_update(w, clipped_sum, batch_size, cfg, rng, t):
    eta = cfg.eta_at(t)
    drift = (cfg.n / batch_size) * clipped_sum + cfg.prior.grad(w)
    z = _gaussian(rng, len(w))
    return w - eta * drift - math.sqrt(eta) * z


def dp_sgd_update(w, per_sample_grads, cfg: DPConfig, rng, t: int = 0) -> np.ndarray:
    """DP-SGD update of a flat vector ``w`` given per-sample gradient rows."""
    G = np.atleast_2d(np.asarray(per_sample_grads, dtype=np.float64))
    return _sgd_update(np.asarray(w, dtype=np.float64), clip_rows(G, cfg.C, cfg.clip_mode).sum(axis=0), len(G), cfg, rng, t)


def dp_sgld_update(w, per_sample_grads, cfg: DPConfig, rng, t: int = 0) -> np.ndarray:
    """DP-SGLD update of a flat vector ``w`` given per-sample gradient rows."""
    G = np.atleast_2d(np.asarray(per_sample_grads, dtype=np.float64))
    return _sgld_update(np.asarray(w, dtype=np.float64), clip_rows(G, cfg.C, cfg.clip_mode).sum(axis=0), len(G), cfg, rng, t)


def step_dp_sgd(net: Network, batch, cfg: DPConfig, rng, t: int = 0, masks=None) -> Network:
    """One DP-SGD update with regularisation.

    ``g_hat = sum(clip(g_i)) / |B| + (sigma C / |B|) z``, then
    ``w <- w - eta_t (g_hat + grad r(w))``.  No noise is drawn when ``sigma = 0``.
    """
    s, _ = clipped_gradient_sum(net, batch, cfg.C, cfg.clip_mode, masks)
    return net.with_params(_sgd_update(net.params, s, len(batch), cfg, rng, t))


def step_dp_sgld(net: Network, batch, cfg: DPConfig, rng, t: int = 0) -> Network:
    """One DP-SGLD update.

    ``w <- w - eta_t ((n / |B|) sum(clip(g_i)) + grad r(w)) - sqrt(eta_t) z``
    with ``z ~ N(0, I)``.  Clipping acts on the raw per-sample gradients
    before the ``n / |B|`` scaling.  The noise is subtracted so that the same
    ``z`` reproduces a DP-SGD step under :func:`map_sgld_to_sgd`; in
    distribution this is the usual ``+ N(0, eta_t)``.
    """
    s, _ = clipped_gradient_sum(net, batch, cfg.C, cfg.clip_mode)
    return net.with_params(_sgld_update(net.params, s, len(batch), cfg, rng, t))


@dataclass
class VariationalParams:
    """Factorised Gaussian ``q(w | mu, rho)`` with ``sigma = log(1 + exp(rho))``."""

    mu: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.rho = np.asarray(self.rho, dtype=np.float64)
        if self.mu.shape != self.rho.shape or self.mu.ndim != 1:
            raise ShapeError("mu and rho must be flat vectors of equal length")

    @property
    def sigma(self) -> np.ndarray:
        return softplus(self.rho)

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.mu, self.rho])

    @classmethod
    def from_theta(cls, theta) -> "VariationalParams":
        theta = np.asarray(theta, dtype=np.float64)
        d = len(theta) // 2
        return cls(theta[:d].copy(), theta[d:].copy())

    def sample(self, rng) -> np.ndarray:
        return self.mu + self.sigma * rng.standard_normal(len(self.mu))


def softplus(rho):
    return np.logaddexp(0.0, rho)


def init_variational(sizes, head="classification", rng=None, rho0=-3.0, output_scale=1.0) -> VariationalParams:
    net = init_network(sizes, head, rng, output_scale)
    return VariationalParams(net.params, np.full(net.d, float(rho0)))


def log_q(w, vp: VariationalParams) -> float:
    sig = vp.sigma
    return float(np.sum(-np.log(sig) - (w - vp.mu) ** 2 / (2 * sig**2) - 0.5 * math.log(2 * math.pi)))


def bbp_objective(net: Network, vp: VariationalParams, eps, inputs, targets, prior: Prior, kl_weight=1.0):
    """Per-batch-mean BBP objective at ``w = mu + sigma * eps``.

    ``kl_weight * (log q(w | theta) - log p(w)) + mean_i loss_i(w)``.
    """
    w = vp.mu + vp.sigma * eps
    return kl_weight * (log_q(w, vp) + prior.neg_log_density(w)) + mean_loss(
        net, inputs, targets, params=w
    )


def bbp_per_sample_gradients(net: Network, vp: VariationalParams, batch, eps_draws, prior: Prior, kl_weight=1.0):
    """Per-sample gradients of the BBP objective with respect to ``(mu, rho)``.

    For each weight draw ``w = mu + sigma * eps``:

    * ``dL/dmu = dL/dw + dL/dmu|_w``
    * ``dL/drho = dL/dw * eps / (1 + exp(-rho)) + dL/drho|_w``

    and the draws are averaged.  Returns an array ``(|B|, 2d)``.
    """
    mu, rho = vp.mu, vp.rho
    sig = softplus(rho)
    dsig = expit(rho)
    out = np.zeros((len(batch), 2 * len(mu)))
    for eps in eps_draws:
        w = mu + sig * eps
        diff = w - mu
        dq_dw = -diff / sig**2
        dq_dmu = diff / sig**2
        dq_drho = (-1.0 / sig + diff**2 / sig**3) * dsig
        complexity_w = kl_weight * (dq_dw + prior.grad(w))
        rows = []
        for chunk in iter_per_sample_chunks(net, batch.inputs, batch.targets, params=w):
            dl_dw = chunk.grads + complexity_w
            g_mu = dl_dw + kl_weight * dq_dmu
            g_rho = dl_dw * (eps * dsig) + kl_weight * dq_drho
            rows.append(np.hstack([g_mu, g_rho]))
        out += np.vstack(rows)
    return out / len(eps_draws)


def step_dp_bbp(
    vp: VariationalParams,
    net: Network,
    batch,
    cfg: DPConfig,
    n_mc: int = 1,
    rng=None,
    eps_rng=None,
    t: int = 0,
    kl_weight: float = 1.0,
) -> VariationalParams:
    """One DP-BBP update of ``theta = (mu, rho)``.

    ``net`` only supplies the architecture.  ``n_mc`` weight draws are shared
    by every sample of the batch; each sample's ``(mu, rho)``-gradient is
    averaged over the draws, clipped as one ``2d`` vector, summed, noised
    with ``(sigma C / |B|) N(0, I_2d)`` and applied with step ``eta_t``.
    The prior enters through the objective, not as a separate regulariser.
    """
    if n_mc < 1:
        raise DomainError("need at least one Monte Carlo draw")
    eps_rng = rng if eps_rng is None else eps_rng
    d = len(vp.mu)
    eps_draws = [eps_rng.standard_normal(d) for _ in range(n_mc)]
    G = bbp_per_sample_gradients(net, vp, batch, eps_draws, cfg.prior, kl_weight)
    if not np.all(np.isfinite(G)):
        i = int(np.flatnonzero(~np.isfinite(G).all(axis=1))[0])
        raise NumericError(f"non-finite BBP gradient for sample {i}", index=i)
    g_hat = clip_rows(G, cfg.C, cfg.clip_mode).sum(axis=0) / len(batch)
    if cfg.sigma > 0:
        g_hat = g_hat + (cfg.sigma * cfg.C / len(batch)) * _gaussian(rng, 2 * d)
    return VariationalParams.from_theta(vp.theta - cfg.eta_at(t) * g_hat)


def sample_dropout_masks(net: Network, rate: float, rng, rows=None):
    """Bernoulli keep-masks for each hidden layer, rescaled by ``1 / (1 - rate)``.

    ``rows=None`` gives one vector per layer (shared across a batch);
    otherwise each mask has shape ``(rows, width)``.
    """
    if not 0.0 <= rate < 1.0:
        raise DomainError("dropout rate must lie in [0, 1)")
    keep = 1.0 - rate
    masks = []
    for h in net.hidden_sizes:
        shape = h if rows is None else (rows, h)
        masks.append((rng.random(shape) < keep) / keep)
    return masks


def step_dp_mc_dropout(
    net: Network, batch, cfg: DPConfig, mask_rng, noise_rng, rate: float = 0.5, t: int = 0, masks=None
) -> Network:
    """One DP-MC-Dropout update: DP-SGD on a freshly dropped-out subnetwork.

    A single mask per hidden layer is drawn for the step (unless ``masks`` is
    given); dropped units receive no data gradient.  Noise and the prior
    gradient still cover all ``d`` coordinates.
    """
    if masks is None:
        masks = sample_dropout_masks(net, rate, mask_rng)
    return step_dp_sgd(net, batch, cfg, noise_rng, t=t, masks=masks)


def map_sgld_to_sgd(eta_sgld: float, C: float, n: int, batch_size: int):
    """DP-SGD hyperparameters reproducing DP-SGLD(eta, C).

    Matching the update coefficients gives ``eta_sgd = n eta`` and
    ``eta_sgd sigma C / |B| = sqrt(eta)``, hence
    ``sigma_sgd = |B| / (n C sqrt(eta))``.  The DP-SGD regulariser must be the
    SGLD one divided by ``n`` (see :meth:`Prior.rescaled`).

    Returns ``(eta_sgd, sigma_sgd, C_sgd)``.
    """
    for name, v in (("eta", eta_sgld), ("C", C), ("n", n), ("batch_size", batch_size)):
        if not v > 0:
            raise DomainError(f"{name} must be positive, got {v}")
    eta_sgd = n * eta_sgld
    sigma_sgd = batch_size / (n * C * math.sqrt(eta_sgld))
    return eta_sgd, sigma_sgd, C


@dataclass(frozen=True)
class SGLDEquivalent:
    eta_sgld: float
    C_sgld: float
    feasible: bool
    implied_C: float


def map_sgd_to_sgld(eta_sgd: float, sigma_sgd: float, C: float, n: int, batch_size: int, rtol=1e-9):
    """Inverse of :func:`map_sgld_to_sgd`.

    Only DP-SGD runs with ``C = |B| / (sqrt(n eta) sigma)`` have a DP-SGLD
    counterpart; otherwise ``feasible`` is False and ``implied_C`` reports the
    clipping norm that would be needed.
    """
    for name, v in (("eta", eta_sgd), ("sigma", sigma_sgd), ("C", C), ("n", n), ("batch_size", batch_size)):
        if not v > 0:
            raise DomainError(f"{name} must be positive, got {v}")
    implied = batch_size / (math.sqrt(n * eta_sgd) * sigma_sgd)
    feasible = abs(C - implied) <= rtol * abs(implied)
    return SGLDEquivalent(eta_sgd / n, C, feasible, implied)


def sgd_config_for_sgld(cfg: DPConfig) -> DPConfig:
    """The DP-SGD configuration equivalent to a DP-SGLD configuration."""
    if callable(cfg.eta):
        raise DomainError("mapping needs a constant learning rate")
    eta_sgd, sigma, C = map_sgld_to_sgd(cfg.eta, cfg.C, cfg.n, cfg.batch_size)
    return replace(cfg, eta=eta_sgd, sigma=sigma, C=C, prior=cfg.prior.rescaled(cfg.n))
