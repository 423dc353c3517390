"""Command-line entry point: ``dpbnn <subcommand> [options]``.

Global options (``--seed``, ``--config``, ``--out``, ``--delta``) go before
the subcommand.  Every subcommand writes plain CSV/JSON/text so results can
be compared byte for byte across reruns.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .calibration import calibration_report
from .data import (
    export_classification_csv,
    export_regression_csv,
    generate_blobs,
    generate_heteroscedastic,
    read_classification_csv,
    read_regression_csv,
)
from .harness import ExperimentConfig, parse_value, preset, preset_names, run_experiment, substream, \
    write_calibration_bins
from .posterior import sample_predictions
from .privacy import delta_from_mu_eps, eps_or_inf, gdp_mu_generic, gdp_mu_sgld, iterations
from .probes import SWEEP_COLUMNS, ProbeSetting, SweepSetting, convergence_probe, sweep_sgd_family


def _overrides(pairs):
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = parse_value(v.strip())
    return out


def _out_dir(args, default):
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(record):
    print(json.dumps(io.to_jsonable(record), sort_keys=True))


# ---------------------------------------------------------------- subcommands


def cmd_generate(args):
    out = _out_dir(args, ".")
    if args.task == "hetero-regression":
        ds = generate_heteroscedastic(args.n or 400, args.seed, args.lengthscale)
        path = out / "hetero.csv"
        export_regression_csv(ds, path)
    else:
        ds = generate_blobs(args.n or 10000, args.classes, args.dim, args.seed, args.separation)
        path = out / "blobs.csv"
        export_classification_csv(ds, path)
    print(path)


def _experiment_config(args):
    values = _overrides(args.set)
    if args.preset:
        values.setdefault("method", args.method)
        cfg = preset(args.preset, values.pop("method"), values.pop("private", not args.non_private), **values)
    elif args.config:
        cfg = ExperimentConfig.from_file(args.config, **values)
    else:
        cfg = ExperimentConfig(**values)
    extra = {}
    if args.seed is not None:
        extra["seed"] = args.seed
    if args.delta is not None:
        extra["delta"] = args.delta
    return replace(cfg, **extra)


def cmd_train(args):
    cfg = _experiment_config(args)
    out = _out_dir(args, "run")
    log = run_experiment(cfg, out)
    _emit(log.summary())
    return 0 if log.status == "ok" else 1


def cmd_predict(args):
    run = Path(args.run)
    ens = io.load_ensemble(run / "ensemble.json")
    if ens.net.head == "regression":
        x = read_regression_csv(args.inputs).x[:, None]
    else:
        x = read_classification_csv(args.inputs).inputs
    cfg = ExperimentConfig.from_file(run / "config.txt")
    seed = cfg.seed if args.seed is None else args.seed
    draws = sample_predictions(ens, x, args.draws, rng=substream(seed, "predict"))
    out = _out_dir(args, ".")
    path = out / "draws.csv"
    if ens.net.head == "classification":
        K = draws[0].probs.shape[1]
        header = ["draw", "example"] + [f"p{k}" for k in range(K)]
        rows = ([d, i, *p] for d, s in enumerate(draws) for i, p in enumerate(s.probs))
    else:
        header = ["draw", "example", "mean", "var"]
        rows = ([d, i, m, v] for d, s in enumerate(draws) for i, (m, v) in enumerate(zip(s.mean, s.var)))
    io.write_csv(path, header, rows)
    print(path)


def cmd_account(args):
    delta = 1e-5 if args.delta is None else args.delta
    T = args.T if args.T is not None else iterations(args.epochs, args.n, args.batch_size)
    if args.eta is not None:
        mu = gdp_mu_sgld(T, args.eta, args.C, args.batch_size, args.n)
    elif args.sigma is not None:
        mu = gdp_mu_generic(T, args.sigma, args.batch_size, args.n)
    else:
        raise SystemExit("account needs --sigma, or --eta and --C")
    eps = eps_or_inf(mu, delta)
    _emit({"mu": mu, "eps": eps, "delta": delta})
    if args.eps_grid:
        out = _out_dir(args, ".")
        grid = np.linspace(0.0, args.eps_grid, 101)
        io.write_csv(out / "delta_curve.csv", ["eps", "delta"], ((e, delta_from_mu_eps(e, mu)) for e in grid))


def cmd_calibrate(args):
    header, rows = io.read_csv(args.predictions)
    pcols = [i for i, h in enumerate(header) if h.startswith("p")]
    if "label" not in header or not pcols:
        raise SystemExit("predictions CSV needs p0..pK-1 and label columns")
    li = header.index("label")
    probs = np.array([[float(r[i]) for i in pcols] for r in rows])
    labels = np.array([int(r[li]) for r in rows])
    rep = calibration_report(probs, labels, args.bins)
    out = _out_dir(args, ".")
    write_calibration_bins(out / "calibration_bins.csv", rep)
    (out / "calibration.txt").write_text(rep.summary() + "\n")
    print(rep.summary())


def cmd_sweep(args):
    setting = SweepSetting(epochs=args.epochs, delta=1e-5 if args.delta is None else args.delta)
    out = _out_dir(args, ".")
    rows = sweep_sgd_family(args.C, args.sigma, setting, args.seed or 0, out / "sweep.csv")
    failed = sum(r[-1] != "ok" for r in rows)
    _emit({"rows": len(rows), "failed": failed, "columns": list(SWEEP_COLUMNS)})


def cmd_probe(args):
    setting = ProbeSetting()
    out = _out_dir(args, ".")
    res = convergence_probe(args.T, args.seed or 0, setting, constant_eta=args.constant_eta)
    io.write_csv(out / "probe.csv", ["T", "eta", "C", "min_grad_norm", "status"],
                 zip(res.T_grid, res.etas, res.Cs, res.min_grad_norm, res.status))
    _emit({"slope": res.slope, "T": res.T_grid, "min_grad_norm": res.min_grad_norm})


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpbnn", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=None, help="run seed (default: config value or 0)")
    p.add_argument("--config", help="key = value experiment config file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--delta", type=float, default=None, help="target delta (default 1e-5)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset as CSV")
    g.add_argument("task", choices=["hetero-regression", "blobs"])
    g.add_argument("--n", type=int)
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--dim", type=int, default=20)
    g.add_argument("--separation", type=float, default=6.0)
    g.add_argument("--lengthscale", type=float, default=1.0)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train and evaluate one configuration")
    t.add_argument("--preset", choices=preset_names())
    t.add_argument("--method", default="dp-sgld")
    t.add_argument("--non-private", action="store_true")
    t.add_argument("--set", nargs="*", metavar="KEY=VALUE", help="config overrides")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="sample the posterior of a trained run")
    pr.add_argument("run", help="directory written by 'train'")
    pr.add_argument("inputs", help="dataset CSV written by 'generate'")
    pr.add_argument("--draws", type=int, default=None)
    pr.set_defaults(func=cmd_predict)

    a = sub.add_parser("account", help="GDP mu and (eps, delta) in closed form")
    a.add_argument("--T", type=int)
    a.add_argument("--epochs", type=int)
    a.add_argument("--n", type=int, required=True)
    a.add_argument("--batch-size", type=int, required=True)
    a.add_argument("--sigma", type=float)
    a.add_argument("--eta", type=float)
    a.add_argument("--C", type=float)
    a.add_argument("--eps-grid", type=float, help="also write delta(eps) on [0, value]")
    a.set_defaults(func=cmd_account)

    c = sub.add_parser("calibrate", help="ECE/MCE and reliability bins from predictions")
    c.add_argument("predictions")
    c.add_argument("--bins", type=int, default=15)
    c.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("sweep", help="DP-SGD family sweep on blobs")
    s.add_argument("--C", type=float, nargs="+", default=[0.5, 1.0, 1.5, 2.0, 5.0])
    s.add_argument("--sigma", type=float, nargs="+", default=[0.5, 0.9, 1.3, 2.0, 3.0])
    s.add_argument("--epochs", type=int, default=5)
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("probe-convergence", help="min gradient norm vs T under the decaying schedule")
    c.add_argument("--T", type=float, nargs="+", default=[1e2, 10**2.5, 1e3, 10**3.5])
    c.add_argument("--constant-eta", action="store_true")
    c.set_defaults(func=cmd_probe)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "account":
        if args.T is None and args.epochs is None:
            raise SystemExit("account needs --T or --epochs")
        if args.eta is not None and args.C is None:
            raise SystemExit("--eta needs --C")
    if args.command == "generate" and args.seed is None:
        args.seed = 0
    return args.func(args) or 0


if __name__ == "__main__":
    sys.exit(main())
