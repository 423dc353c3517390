"""Experiment configuration, the training loop and run artifacts.

One run trains a network with one of the four private optimisers, tracks the
privacy spent after every logged iteration (recomputed from the closed form,
never accumulated), builds the posterior ensemble, evaluates it on the test
split and optionally writes its artifacts:

============================  ==============================================
``config.txt``                the resolved configuration, ``key = value``
``log.csv``                   step, epoch, loss, grad_norm, mu, eps
``summary.json``              final metrics and run status
``checkpoint.json``           final network (variational mean for BBP)
``ensemble.json``             posterior ensemble
``predictions.csv``           mean test predictions
``calibration_bins.csv``      reliability-diagram bins (classification)
============================  ==============================================

All randomness comes from named substreams of one seed (``init``, ``batch``,
``noise``, ``mask``, ``bbp``, ``probe``, ``predict``), so re-running a config
reproduces every file byte for byte.
"""

from __future__ import annotations

import ast
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import io
from .calibration import calibration_report
from .data import generate_blobs, generate_heteroscedastic, load_mnist_idx, sample_batch
from .dp_optim import (
    DPConfig,
    Prior,
    init_variational,
    step_dp_bbp,
    step_dp_mc_dropout,
    step_dp_sgd,
    step_dp_sgld,
)
from .errors import DomainError
from .nn_core import Batch, Network, batch_gradient, init_network
from .posterior import (
    PosteriorEnsemble,
    SnapshotTrail,
    decompose_uncertainty,
    predictive_mean_probs,
    sample_predictions,
)
from .privacy import eps_or_inf, gdp_mu_generic, gdp_mu_sgld

TASKS = ("blobs", "hetero-regression", "mnist-mlp")
METHODS = ("dp-sgd", "dp-sgld", "dp-bbp", "dp-mc-dropout")
STREAMS = {"init": 0, "batch": 1, "noise": 2, "mask": 3, "bbp": 4, "probe": 5, "predict": 6}


def substream(seed: int, name: str, replicate: int = None) -> np.random.Generator:
    """Independent generator for one named use of the run seed.

    ``replicate`` splits a stream further for repeated chains on one seed.
    """
    key = [int(seed), STREAMS[name]] + ([] if replicate is None else [int(replicate)])
    return np.random.default_rng(np.random.SeedSequence(key))


@dataclass
class ExperimentConfig:
    """Everything that determines a run.

    ``private=False`` means no clipping (``C = inf``) and no Gaussian
    mechanism (``sigma = 0``); DP-SGLD still injects its Langevin noise.
    ``snapshot_from_epoch = -1`` records SGLD snapshots during the final
    epoch only.  ``kl_weight = None`` uses ``1 / n``.
    """

    task: str = "blobs"
    method: str = "dp-sgld"
    private: bool = True
    eta: float = 3e-5
    batch_size: int = 256
    full_batch: bool = False
    C: float = 1.5
    sigma: float = 1.3
    prior: str = "gaussian"
    prior_scale: float = 0.1
    clip_mode: str = "standard"
    epochs: int = 15
    hidden: tuple = (100, 100)
    K: int = 100
    snapshot_capacity: int = 100
    snapshot_from_epoch: int = -1
    dropout_rate: float = 0.5
    n_mc: int = 1
    kl_weight: float = None
    rho0: float = -3.0
    output_init_scale: float = 1.0
    seed: int = 0
    data_seed: int = None
    delta: float = 1e-5
    n_train: int = 10000
    n_test: int = 2000
    num_classes: int = 10
    input_dim: int = 20
    separation: float = 6.0
    n_points: int = 400
    lengthscale: float = 1.0
    mnist_dir: str = ""
    standardize: bool = False
    log_every: int = 1
    probe_size: int = 2048
    calibration_bins: int = 15
    write_ensemble: bool = True

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        self.hidden = tuple(int(h) for h in np.atleast_1d(self.hidden))
        if self.epochs < 0 or self.K < 1 or self.log_every < 1:
            raise DomainError("epochs must be >= 0, K and log_every >= 1")
        if self.private and self.method != "dp-sgld" and not self.sigma > 0:
            raise DomainError("a private run needs sigma > 0")

    @property
    def effective_C(self) -> float:
        return float(self.C) if self.private else math.inf

    @property
    def effective_sigma(self) -> float:
        if not self.private or self.method == "dp-sgld":
            return 0.0
        return float(self.sigma)

    def weight_prior(self) -> Prior:
        return Prior(self.prior, self.prior_scale) if self.prior != "none" else Prior()

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)!r}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str, **overrides) -> "ExperimentConfig":
        """Parse ``key = value`` lines (``#`` starts a comment)."""
        known = {f.name for f in fields(cls)} | {"preset"}
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'key = value'")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
            values[key] = parse_value(raw)
        values.update(overrides)
        base = values.pop("preset", None)
        if base is not None:
            return replace(preset(base, values.get("method"), values.get("private", True)), **values)
        return cls(**values)

    @classmethod
    def from_file(cls, path, **overrides) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text(), **overrides)


def parse_value(raw: str):
    if raw in ("inf", "+inf"):
        return math.inf
    if raw.lower() in ("none", "null"):
        return None
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        return raw.strip("'\"")


# ---------------------------------------------------------------- presets

_PRESETS = {
    "mnist-mlp-paper": dict(
        task="mnist-mlp", hidden=(1200, 1200), n_train=60000, n_test=10000, batch_size=256, C=1.5,
        epochs=15, delta=1e-5, prior="gaussian", prior_scale=0.1, K=100, snapshot_capacity=100,
    ),
    "mnist-10k": dict(
        task="mnist-mlp", hidden=(200, 200), n_train=10000, n_test=10000, batch_size=256, C=1.5,
        epochs=15, delta=1e-5, prior="gaussian", prior_scale=0.1, K=100, snapshot_capacity=100,
    ),
    "blobs": dict(
        task="blobs", hidden=(100, 100), n_train=10000, n_test=2000, num_classes=10, input_dim=20,
        batch_size=256, C=1.5, epochs=15, delta=1e-5, prior="gaussian", prior_scale=0.1, K=100,
        snapshot_capacity=100,
    ),
    "hetero-paper": dict(
        task="hetero-regression", hidden=(200, 200), n_points=400, full_batch=True, epochs=200,
        delta=1 / 250, prior="gaussian", prior_scale=0.1, K=1000, snapshot_capacity=1000,
        snapshot_from_epoch=100, output_init_scale=0.1, write_ensemble=False,
    ),
}

# optimiser settings per (preset family, method); n_train-scaled for the desk-scale variants
_METHOD_SETTINGS = {
    "mnist": {
        "dp-sgld": dict(eta=5e-6),
        "dp-sgd": dict(eta=0.25, sigma=1.3),
        "dp-bbp": dict(eta=0.25, sigma=1.3),
        "dp-mc-dropout": dict(eta=2e-4, sigma=1.3, dropout_rate=0.5),
    },
    "hetero": {
        "dp-sgld": dict(eta=2.5e-4, C=100.0),
        "dp-sgd": dict(eta=2.5e-4 * 250, C=100.0, sigma=1.0),
        "dp-bbp": dict(eta=0.01, C=100.0, sigma=10.0),
        "dp-mc-dropout": dict(eta=5e-5, C=2000.0, sigma=10.0, dropout_rate=0.5),
    },
}

_DESK_DROPOUT_ETA = 0.25

# non-private SGLD on the regression task needs a smaller step to stay stable
_HETERO_NONDP_SGLD = dict(eta=2e-5, epochs=1000, snapshot_from_epoch=500)


def preset_names():
    return tuple(_PRESETS)


def preset(name: str, method: str = None, private: bool = True, **overrides) -> ExperimentConfig:
    """A named configuration with the optimiser settings for ``method``.

    Learning rates of the SGLD-type methods on the desk-scale presets are
    scaled by ``60000 / n_train`` so that ``n * eta`` matches the full run.
    """
    if name not in _PRESETS:
        raise ValueError(f"unknown preset {name!r}; expected one of {tuple(_PRESETS)}")
    method = method or "dp-sgld"
    values = dict(_PRESETS[name], method=method, private=private)
    family = "hetero" if name.startswith("hetero") else "mnist"
    settings = dict(_METHOD_SETTINGS[family][method])
    if family == "mnist" and method == "dp-sgld":
        settings["eta"] *= 60000 / values["n_train"]
    if name != "mnist-mlp-paper" and method == "dp-mc-dropout" and family == "mnist":
        # 2e-4 leaves plain mean-loss SGD untrained within the desk-scale budget
        settings["eta"] = _DESK_DROPOUT_ETA
    if family == "hetero" and method == "dp-sgld" and not private:
        settings.update(_HETERO_NONDP_SGLD)
    values.update(settings)
    values.update(overrides)
    return ExperimentConfig(**values)


# ---------------------------------------------------------------- data


@dataclass
class TaskData:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    head: str
    sizes: tuple


def _find(directory, stem):
    for suffix in ("", ".gz"):
        for name in (stem, stem.replace("-idx", ".idx")):
            p = Path(directory) / (name + suffix)
            if p.exists():
                return p
    raise FileNotFoundError(f"no {stem}[.gz] in {directory}")


def load_task(cfg: ExperimentConfig) -> TaskData:
    dseed = cfg.seed if cfg.data_seed is None else cfg.data_seed
    if cfg.task == "hetero-regression":
        ds = generate_heteroscedastic(cfg.n_points, dseed, cfg.lengthscale)
        return TaskData(ds.x_train, ds.y_train, ds.x_test, ds.y_test, "regression", (1, *cfg.hidden, 2))
    if cfg.task == "blobs":
        ds = generate_blobs(cfg.n_train + cfg.n_test, cfg.num_classes, cfg.input_dim, dseed, cfg.separation)
        x, y, m = ds.inputs, ds.labels, cfg.n_train
        K = cfg.num_classes
        return TaskData(x[:m], y[:m], x[m:], y[m:], "classification", (x.shape[1], *cfg.hidden, K))
    d = cfg.mnist_dir
    train = load_mnist_idx(_find(d, "train-images-idx3-ubyte"), _find(d, "train-labels-idx1-ubyte"), cfg.standardize)
    test = load_mnist_idx(_find(d, "t10k-images-idx3-ubyte"), _find(d, "t10k-labels-idx1-ubyte"), cfg.standardize)
    xtr, ytr = train.inputs[: cfg.n_train], train.labels[: cfg.n_train]
    xte, yte = test.inputs[: cfg.n_test], test.labels[: cfg.n_test]
    return TaskData(xtr, ytr, xte, yte, "classification", (xtr.shape[1], *cfg.hidden, 10))


# ---------------------------------------------------------------- accounting


def privacy_after(cfg: ExperimentConfig, steps: int, n: int, batch_size: int):
    """``(mu, eps)`` after ``steps`` iterations, from the closed form.

    ``eps`` is ``inf`` when the run is not private or when ``delta`` cannot be
    met with ``eps <= 200``.
    """
    if steps == 0:
        return 0.0, 0.0
    if not cfg.private:
        return math.inf, math.inf
    if cfg.method == "dp-sgld":
        mu = gdp_mu_sgld(steps, cfg.eta, cfg.C, batch_size, n)
    else:
        mu = gdp_mu_generic(steps, cfg.sigma, batch_size, n)
    return mu, eps_or_inf(mu, cfg.delta)


# ---------------------------------------------------------------- run


LOG_COLUMNS = ("step", "epoch", "loss", "grad_norm", "mu", "eps")


@dataclass
class RunLog:
    """Per-iteration records and final metrics of one run."""

    records: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    status: str = "ok"
    failed_step: int = None
    message: str = ""
    network: Network = None
    ensemble: PosteriorEnsemble = None
    streams_used: dict = field(default_factory=dict)

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.records], dtype=np.float64)

    def summary(self) -> dict:
        return {"status": self.status, "failed_step": self.failed_step, "message": self.message,
                "metrics": self.metrics}


def _steps_per_epoch(n, batch_size):
    return math.ceil(n / batch_size)


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> RunLog:
    """Train, build the posterior, evaluate, and write artifacts to ``out_dir``.

    Errors raised by the numerical modules stop training; the run is then
    reported with ``status = "failed"`` and the failing step.
    """
    data = load_task(cfg)
    n = len(data.x_train)
    B = n if cfg.full_batch else min(cfg.batch_size, n)
    spe = _steps_per_epoch(n, B)
    T = cfg.epochs * spe
    # SGLD uses the full log posterior; the SGD-type methods minimise a mean
    # loss, so their regulariser is the prior term divided by n
    prior = cfg.weight_prior()
    if cfg.method in ("dp-sgd", "dp-mc-dropout"):
        prior = prior.rescaled(n)
    dp = DPConfig(cfg.eta, B, n, cfg.effective_C, cfg.effective_sigma, T, prior, cfg.clip_mode)
    rngs = {name: substream(cfg.seed, name) for name in STREAMS}

    net = init_network(data.sizes, data.head, rngs["init"], cfg.output_init_scale)
    vp = None
    if cfg.method == "dp-bbp":
        vp = init_variational(data.sizes, data.head, substream(cfg.seed, "init"), cfg.rho0, cfg.output_init_scale)
        net = net.with_params(vp.mu)
    kl_weight = 1.0 / n if cfg.kl_weight is None else cfg.kl_weight
    snap_epoch = cfg.epochs - 1 if cfg.snapshot_from_epoch < 0 else cfg.snapshot_from_epoch
    trail = SnapshotTrail(cfg.snapshot_capacity)
    probe_idx = np.sort(rngs["probe"].permutation(n)[: min(n, cfg.probe_size)])
    x_probe, y_probe = data.x_train[probe_idx], data.y_train[probe_idx]

    log = RunLog()

    def record(step):
        g, loss = batch_gradient(net, x_probe, y_probe)
        mu, eps = privacy_after(cfg, step, n, B)
        log.records.append({"step": step, "epoch": step / spe, "loss": loss,
                            "grad_norm": float(np.linalg.norm(g)), "mu": mu, "eps": eps})

    record(0)
    t = 0
    try:
        for epoch in range(cfg.epochs):
            for _ in range(spe):
                idx = np.arange(n) if B == n else sample_batch(n, B, rngs["batch"])
                batch = Batch.take(data.x_train, data.y_train, idx)
                if cfg.method == "dp-sgld":
                    net = step_dp_sgld(net, batch, dp, rngs["noise"], t)
                elif cfg.method == "dp-sgd":
                    net = step_dp_sgd(net, batch, dp, rngs["noise"], t)
                elif cfg.method == "dp-mc-dropout":
                    net = step_dp_mc_dropout(net, batch, dp, rngs["mask"], rngs["noise"], cfg.dropout_rate, t)
                else:
                    vp = step_dp_bbp(vp, net, batch, dp, cfg.n_mc, rngs["noise"], rngs["bbp"], t, kl_weight)
                    net = net.with_params(vp.mu)
                t += 1
                if epoch >= snap_epoch:
                    trail.push(net.params)
                if t % cfg.log_every == 0 or t == T:
                    record(t)
    except (ArithmeticError, ValueError) as err:
        log.status, log.failed_step, log.message = "failed", t, f"{type(err).__name__}: {err}"

    log.network = net
    # training streams only; the predict stream is drawn from below
    log.streams_used = {name: rng.bit_generator.state != substream(cfg.seed, name).bit_generator.state
                        for name, rng in rngs.items()}
    if log.status == "ok":
        if cfg.method == "dp-sgld":
            ens = PosteriorEnsemble.from_snapshots(net, trail.snapshots()) if len(trail) else \
                PosteriorEnsemble.from_snapshots(net, [net.params])
        elif cfg.method == "dp-bbp":
            ens = PosteriorEnsemble.from_variational(net, vp, cfg.K)
        elif cfg.method == "dp-mc-dropout":
            ens = PosteriorEnsemble.from_dropout(net, cfg.dropout_rate, cfg.K)
        else:
            ens = PosteriorEnsemble.from_snapshots(net, [net.params])
        log.ensemble = ens
        draws = sample_predictions(ens, data.x_test, rng=rngs["predict"])
        _evaluate(log, cfg, data, draws, T)
    if out_dir is not None:
        _write_artifacts(log, cfg, data, out_dir)
    return log


def _evaluate(log, cfg, data, draws, T):
    final = log.records[-1]
    log.metrics.update(iterations=T, mu=final["mu"], eps=final["eps"], delta=cfg.delta, draws=len(draws))
    if data.head == "classification":
        probs = predictive_mean_probs(draws)
        rep = calibration_report(probs, data.y_test, cfg.calibration_bins)
        log.metrics.update(accuracy=float(np.mean(np.argmax(probs, axis=1) == data.y_test)),
                           ece=rep.ece, mce=rep.mce)
        log._probs, log._report = probs, rep
    else:
        y_test = np.asarray(data.y_test)
        if len(draws) >= 2:
            data_unc, post_unc, mean = decompose_uncertainty(draws)
        else:
            mean, data_unc, post_unc = draws[0].mean, draws[0].var, np.full(len(y_test), np.nan)
        log.metrics.update(mse=float(np.mean((mean - y_test) ** 2)),
                           data_uncertainty=float(np.mean(data_unc)),
                           posterior_uncertainty=float(np.mean(post_unc)))
        log._regression = (mean, data_unc, post_unc)


def _write_artifacts(log, cfg, data, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    io.write_csv(out / "log.csv", LOG_COLUMNS, ([r[c] for c in LOG_COLUMNS] for r in log.records))
    io.write_json(out / "summary.json", log.summary())
    io.save_network(log.network, out / "checkpoint.json")
    if log.status != "ok":
        return
    if cfg.write_ensemble:
        io.save_ensemble(log.ensemble, out / "ensemble.json")
    if data.head == "classification":
        K = log._probs.shape[1]
        io.write_csv(out / "predictions.csv", [f"p{k}" for k in range(K)] + ["label"],
                     (list(p) + [int(y)] for p, y in zip(log._probs, data.y_test)))
        write_calibration_bins(out / "calibration_bins.csv", log._report)
    else:
        mean, du, pu = log._regression
        io.write_csv(out / "predictions.csv", ["x", "y", "mean", "data_uncertainty", "posterior_uncertainty"],
                     zip(data.x_test[:, 0], data.y_test, mean, du, pu))


def write_calibration_bins(path, report) -> None:
    io.write_csv(path, ["lower", "upper", "midpoint", "count", "accuracy", "confidence"], report.as_rows())


def config_dict(cfg: ExperimentConfig) -> dict:
    return asdict(cfg)
