"""Convergence probe under the decaying schedule, and the DP-SGD family sweep.

Schedule: for a budget of ``T`` DP-SGLD iterations the clipping norm is
``C = C0 * T**(-1/6)`` and the learning rate is the positive root of::

    eta^2 n^2 C^2 T L + eta^3 d T L = L0

(``L`` a smoothness constant, ``L0`` the initial loss, ``d`` the parameter
count).  With stabilized clipping the minimum gradient norm over the run
should decay like ``T**(-1/4)``; :func:`convergence_probe` estimates the
exponent by a log-log fit.

:func:`sweep_sgd_family` traces (eps, accuracy) for a grid of DP-SGD
configurations together with DP-SGLD runs, each of which is also replayed
as the equivalent DP-SGD run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from . import io
from .dp_optim import DPConfig, Prior, map_sgld_to_sgd, sgd_config_for_sgld, step_dp_sgd, step_dp_sgld
from .data import generate_blobs, sample_batch
from .errors import DomainError
from .harness import substream
from .nn_core import Batch, batch_gradient, init_network, mean_loss, predict_proba
from .privacy import eps_or_inf, gdp_mu_generic, gdp_mu_sgld


def theorem5_schedule(T: int, C0: float, L: float, L0: float, d: int, n: int, batch_size: int):
    """``(eta, C)`` for a run of ``T`` iterations.

    The left side is strictly increasing in ``eta > 0``, so the root is
    bracketed by doubling and found with Brent's method.  ``batch_size`` does
    not enter the equation; it is accepted so callers can pass a full setting.
    """
    for name, v in (("T", T), ("C0", C0), ("L", L), ("L0", L0), ("n", n), ("batch_size", batch_size)):
        if not v > 0:
            raise DomainError(f"{name} must be positive, got {v}")
    if d < 0:
        raise DomainError("d must be non-negative")
    C = C0 * T ** (-1.0 / 6.0)
    a = n**2 * C**2 * T * L
    b = d * T * L

    def f(eta):
        return (a * eta**2 + b * eta**3) / L0 - 1.0

    hi = math.sqrt(L0 / a)  # root when d = 0; the cubic term only lowers it
    if d == 0 or f(hi) <= 0.0:  # cubic term below rounding at the quadratic root
        return hi, C
    eta = brentq(f, 0.0, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    return eta, C


def schedule_residual(eta, T, C, L, L0, d, n):
    return eta**2 * n**2 * C**2 * T * L + eta**3 * d * T * L - L0


# ---------------------------------------------------------------- probe


@dataclass
class ProbeResult:
    T_grid: np.ndarray
    min_grad_norm: np.ndarray
    slope: float
    etas: np.ndarray
    Cs: np.ndarray
    status: list


@dataclass
class ProbeSetting:
    """Synthetic task and constants for :func:`convergence_probe`.

    The large ``n`` keeps the Langevin noise floor of the gradient norm
    (roughly ``sqrt(tr(H) / n)`` at stationarity) below the measured range;
    per-step cost does not grow with ``n``.  ``C0`` sets how much of the
    run is spent in the transient that the fit measures.
    """

    n: int = 50_000
    num_classes: int = 3
    input_dim: int = 5
    separation: float = 3.0
    hidden: tuple = (16,)
    batch_size: int = 100
    C0: float = 12.0
    L: float = 1.0
    L0: float = None
    prior: Prior = Prior()
    probe_size: int = 2048
    replicates: int = 4


def loglog_slope(T_grid, values) -> float:
    T_grid = np.asarray(T_grid, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if len(T_grid) < 2:
        raise DomainError("slope needs at least two grid points")
    ok = np.isfinite(values) & (values > 0)
    if ok.sum() < 2:
        raise DomainError("fewer than two usable points for the slope")
    return float(np.polyfit(np.log(T_grid[ok]), np.log(values[ok]), 1)[0])


def _grad_norm_trace(setting, data, seed, replicate, T, eta, C):
    x, y = data
    n = len(y)
    sizes = (x.shape[1], *setting.hidden, setting.num_classes)
    net = init_network(sizes, rng=substream(seed, "init"))
    cfg = DPConfig(eta, setting.batch_size, n, C, 0.0, T, setting.prior, "stabilized")
    brng, nrng = substream(seed, "batch", replicate), substream(seed, "noise", replicate)
    probe = np.sort(substream(seed, "probe").permutation(n)[: min(n, setting.probe_size)])
    xp, yp = x[probe], y[probe]
    trace = np.empty(T + 1)
    trace[0] = np.linalg.norm(batch_gradient(net, xp, yp)[0])
    for t in range(T):
        batch = Batch.take(x, y, sample_batch(n, setting.batch_size, brng))
        net = step_dp_sgld(net, batch, cfg, nrng, t)
        g, loss = batch_gradient(net, xp, yp)
        if not math.isfinite(loss):
            raise FloatingPointError(f"loss diverged at step {t}")
        trace[t + 1] = np.linalg.norm(g)
    return trace


def _min_grad_norm_run(setting, data, seed, T, eta, C):
    # the expectation is estimated by averaging independent chains from one init
    traces = [_grad_norm_trace(setting, data, seed, r, T, eta, C) for r in range(setting.replicates)]
    return float(np.min(np.mean(traces, axis=0)))


def convergence_probe(T_grid, seed: int = 0, setting: ProbeSetting = None, constant_eta: bool = False) -> ProbeResult:
    """Log-log slope of ``min_t |grad|`` against ``T`` under the schedule.

    Each grid point is an independent DP-SGLD run of ``T`` iterations with
    stabilized clipping and ``(eta, C)`` from :func:`theorem5_schedule`; the
    full-batch gradient norm (on at most ``probe_size`` examples) is measured
    after every step and averaged over ``setting.replicates`` chains that
    share data and initialisation but not batches or noise, which estimates
    ``E|g_t|`` before the minimum over ``t`` is taken.  With
    ``constant_eta=True`` every run uses the ``(eta, C)`` of the smallest
    ``T`` instead, as a control.  Divergent runs are reported in ``status``
    and left out of the fit.
    """
    setting = setting or ProbeSetting()
    T_grid = np.asarray(sorted(int(round(t)) for t in T_grid))
    if len(T_grid) < 2:
        raise DomainError("slope undefined for a grid with fewer than two points")
    ds = generate_blobs(setting.n, setting.num_classes, setting.input_dim, seed, setting.separation)
    data = (ds.inputs, ds.labels)
    sizes = (setting.input_dim, *setting.hidden, setting.num_classes)
    d = init_network(sizes).d
    L0 = setting.L0
    if L0 is None:
        L0 = mean_loss(init_network(sizes, rng=substream(seed, "init")), *data)
    sched = [theorem5_schedule(T, setting.C0, setting.L, L0, d, setting.n, setting.batch_size) for T in T_grid]
    if constant_eta:
        sched = [sched[0]] * len(T_grid)
    mins, status = [], []
    for T, (eta, C) in zip(T_grid, sched):
        try:
            mins.append(_min_grad_norm_run(setting, data, seed, int(T), eta, C))
            status.append("ok")
        except (ArithmeticError, ValueError) as err:
            mins.append(math.nan)
            status.append(f"diverged: {err}")
    mins = np.array(mins)
    return ProbeResult(T_grid, mins, loglog_slope(T_grid, mins), np.array([s[0] for s in sched]),
                       np.array([s[1] for s in sched]), status)


# ---------------------------------------------------------------- sweep


SWEEP_COLUMNS = ("method", "C", "sigma", "eta", "epoch", "mu", "eps", "accuracy", "status")


@dataclass
class SweepSetting:
    n_train: int = 2000
    n_test: int = 1000
    num_classes: int = 10
    input_dim: int = 20
    separation: float = 4.0
    hidden: tuple = (32,)
    batch_size: int = 64
    epochs: int = 5
    eta_sgd: float = 0.25
    eta_sgld: float = None
    prior: Prior = Prior()
    delta: float = 1e-5


def _accuracy(net, x, y):
    return float(np.mean(np.argmax(predict_proba(net, x), axis=1) == y))


def _train_cell(data, setting, cfg, stepper, seed, mu_fn):
    xtr, ytr, xte, yte = data
    n = len(ytr)
    net = init_network((xtr.shape[1], *setting.hidden, setting.num_classes), rng=substream(seed, "init"))
    brng, nrng = substream(seed, "batch"), substream(seed, "noise")
    spe = math.ceil(n / cfg.batch_size)
    rows = []
    t = 0
    for epoch in range(1, setting.epochs + 1):
        for _ in range(spe):
            batch = Batch.take(xtr, ytr, sample_batch(n, cfg.batch_size, brng))
            net = stepper(net, batch, cfg, nrng, t)
            t += 1
        mu = mu_fn(t)
        rows.append((epoch, mu, eps_or_inf(mu, setting.delta), _accuracy(net, xte, yte)))
    return rows


def sweep_sgd_family(C_grid, sigma_grid, setting: SweepSetting = None, seed: int = 0, out_path=None):
    """Rows of ``SWEEP_COLUMNS`` for every cell and logging epoch.

    DP-SGD cells use every ``(C, sigma)`` pair with ``eta_sgd``.  For each
    ``C`` a DP-SGLD run with ``eta_sgld`` (default ``eta_sgd / n``) is done
    directly (``dp-sgld``) and as the mapped DP-SGD run (``dp-sgld-mapped``),
    both on the same seed.  A failing cell is recorded and the sweep goes on.
    """
    setting = setting or SweepSetting()
    ds = generate_blobs(setting.n_train + setting.n_test, setting.num_classes, setting.input_dim, seed,
                        setting.separation)
    m = setting.n_train
    data = (ds.inputs[:m], ds.labels[:m], ds.inputs[m:], ds.labels[m:])
    n, B = m, setting.batch_size
    eta_sgld = setting.eta_sgld if setting.eta_sgld is not None else setting.eta_sgd / n
    rows = []

    def run(tag, C, sigma, eta, cfg_fn, stepper, mu_fn):
        try:
            cells = _train_cell(data, setting, cfg_fn(), stepper, seed, mu_fn)
            rows.extend((tag, C, sigma, eta, *r, "ok") for r in cells)
        except (ArithmeticError, ValueError) as err:
            rows.append((tag, C, sigma, eta, 0, math.nan, math.nan, math.nan, f"failed: {err}"))

    for C in C_grid:
        for sigma in sigma_grid:
            run("dp-sgd", C, sigma, setting.eta_sgd,
                lambda: DPConfig(setting.eta_sgd, B, n, C, sigma, prior=setting.prior), step_dp_sgd,
                lambda t: gdp_mu_generic(t, sigma, B, n))
    for C in C_grid:
        sgld_cfg = DPConfig(eta_sgld, B, n, C, prior=setting.prior)
        _, sigma_map, _ = map_sgld_to_sgd(eta_sgld, C, n, B)
        run("dp-sgld", C, sigma_map, eta_sgld, lambda: sgld_cfg, step_dp_sgld,
            lambda t: gdp_mu_sgld(t, eta_sgld, C, B, n))
        run("dp-sgld-mapped", C, sigma_map, n * eta_sgld, lambda: sgd_config_for_sgld(sgld_cfg), step_dp_sgd,
            lambda t: gdp_mu_generic(t, sigma_map, B, n))
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        io.write_csv(out_path, SWEEP_COLUMNS, rows)
    return rows


def pareto_dominated_fraction(sgld_points, sgd_points) -> float:
    """Share of ``(eps, accuracy)`` SGD points dominated by some SGLD point.

    A point is dominated when another has ``eps`` no larger and accuracy no
    smaller, with at least one strict.
    """
    sgld = np.asarray(sgld_points, dtype=np.float64).reshape(-1, 2)
    sgd = np.asarray(sgd_points, dtype=np.float64).reshape(-1, 2)
    if len(sgd) == 0:
        return math.nan
    dom = 0
    for e, a in sgd:
        weak = (sgld[:, 0] <= e) & (sgld[:, 1] >= a)
        strict = (sgld[:, 0] < e) | (sgld[:, 1] > a)
        dom += bool(np.any(weak & strict))
    return dom / len(sgd)
