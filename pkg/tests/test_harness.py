import math

import numpy as np
import pytest

from dpbnn import io
from dpbnn.errors import DomainError
from dpbnn.harness import ExperimentConfig, preset, preset_names, privacy_after, run_experiment, substream
from dpbnn.privacy import eps_from_mu_delta, gdp_mu_sgld


def small(**kw):
    base = dict(task="blobs", n_train=400, n_test=200, num_classes=3, input_dim=4, separation=5.0, hidden=(8,),
                batch_size=40, epochs=2, K=5, snapshot_capacity=5, eta=1e-4, C=1.0, sigma=1.0)
    return ExperimentConfig(**(base | kw))


def test_config_text_round_trip(tmp_path):
    cfg = small(method="dp-bbp", C=math.inf, kl_weight=None, hidden=(3, 4))
    p = tmp_path / "c.txt"
    p.write_text(cfg.to_text())
    assert ExperimentConfig.from_file(p) == cfg


def test_config_comments_overrides_and_errors():
    cfg = ExperimentConfig.from_text("# header\nmethod = 'dp-sgd'  # trailing\nepochs = 3\n", seed=9)
    assert cfg.method == "dp-sgd" and cfg.epochs == 3 and cfg.seed == 9
    with pytest.raises(ValueError):
        ExperimentConfig.from_text("no_such_key = 1")
    with pytest.raises(ValueError):
        ExperimentConfig.from_text("epochs 3")
    with pytest.raises(ValueError):
        ExperimentConfig(method="adam")
    with pytest.raises(DomainError):
        ExperimentConfig(method="dp-sgd", sigma=0.0)


def test_config_preset_key():
    cfg = ExperimentConfig.from_text("preset = blobs\nepochs = 2\n")
    assert cfg.hidden == (100, 100) and cfg.epochs == 2


def test_presets():
    assert set(preset_names()) >= {"mnist-mlp-paper", "hetero-paper", "mnist-10k", "blobs"}
    full = preset("mnist-mlp-paper")
    assert full.hidden == (1200, 1200) and full.n_train == 60000 and full.batch_size == 256
    assert full.eta == 5e-6
    # desk-scale SGLD keeps n * eta of the full run
    assert preset("blobs").eta * 10000 == pytest.approx(full.eta * 60000)
    assert preset("blobs", "dp-sgd").eta == 0.25
    h = preset("hetero-paper")
    assert h.full_batch and h.epochs == 200 and h.delta == 1 / 250
    with pytest.raises(ValueError):
        preset("cifar")


def test_substreams_are_independent_and_reproducible():
    a = substream(3, "noise").standard_normal(4)
    np.testing.assert_array_equal(a, substream(3, "noise").standard_normal(4))
    assert not np.array_equal(a, substream(3, "batch").standard_normal(4))
    assert not np.array_equal(a, substream(3, "noise", 1).standard_normal(4))


def test_privacy_after():
    cfg = small()
    assert privacy_after(cfg, 0, 400, 40) == (0.0, 0.0)
    mu, eps = privacy_after(cfg, 20, 400, 40)
    assert mu == gdp_mu_sgld(20, cfg.eta, cfg.C, 40, 400)
    assert eps == eps_from_mu_delta(mu, cfg.delta)
    assert privacy_after(small(private=False), 5, 400, 40) == (math.inf, math.inf)
    assert privacy_after(small(eta=1.0, C=10.0), 5, 400, 40)[1] == math.inf


def test_non_private_sgd_learns_two_blobs():
    cfg = ExperimentConfig(task="blobs", method="dp-sgd", private=False, n_train=2000, n_test=1000, num_classes=2,
                           input_dim=5, separation=5.0, hidden=(16,), batch_size=50, epochs=5, eta=0.1,
                           prior="none")
    log = run_experiment(cfg)
    assert log.status == "ok"
    assert log.metrics["accuracy"] >= 0.98
    assert np.all(np.isinf(log.column("mu")[1:]))


def test_zero_epochs_is_untrained():
    cfg = small(epochs=0)
    log = run_experiment(cfg)
    assert log.metrics["iterations"] == 0 and log.metrics["eps"] == 0.0
    assert len(log.records) == 1
    from dpbnn.harness import load_task
    from dpbnn.nn_core import init_network, predict_proba

    data = load_task(cfg)
    net = init_network(data.sizes, rng=substream(cfg.seed, "init"))
    acc = np.mean(np.argmax(predict_proba(net, data.x_test), axis=1) == data.y_test)
    assert log.metrics["accuracy"] == acc


def test_logged_mu_matches_closed_form_and_grows():
    cfg = small(log_every=3)
    log = run_experiment(cfg)
    steps = log.column("step").astype(int)
    assert steps[0] == 0 and steps[-1] == 20 and np.all(np.diff(steps) > 0)
    expected = [0.0] + [gdp_mu_sgld(s, cfg.eta, cfg.C, 40, 400) for s in steps[1:]]
    np.testing.assert_array_equal(log.column("mu"), expected)
    assert np.all(np.diff(log.column("eps")) >= 0)


@pytest.mark.parametrize("method", ["dp-sgld", "dp-sgd", "dp-bbp", "dp-mc-dropout"])
def test_rerun_is_bit_identical(tmp_path, method):
    cfg = small(method=method, eta=1e-4 if method == "dp-sgld" else 0.05)
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    names = {p.name for p in (tmp_path / "a").iterdir()}
    assert {"config.txt", "log.csv", "summary.json", "checkpoint.json", "predictions.csv",
            "calibration_bins.csv", "ensemble.json"} <= names
    assert io.files_identical(tmp_path / "a", tmp_path / "b")
    run_experiment(small(method=method, seed=1, eta=cfg.eta), tmp_path / "c")
    assert not io.files_identical(tmp_path / "a", tmp_path / "c")


def test_regression_run_writes_uncertainties(tmp_path):
    cfg = preset("hetero-paper", "dp-sgld", n_points=40, hidden=(8,), epochs=6, snapshot_from_epoch=3, K=3,
                 snapshot_capacity=3)
    log = run_experiment(cfg, tmp_path)
    assert log.status == "ok"
    assert log.metrics["draws"] == 3
    header, rows = io.read_csv(tmp_path / "predictions.csv")
    assert header == ["x", "y", "mean", "data_uncertainty", "posterior_uncertainty"]
    assert len(rows) == 15
    assert all(float(r[3]) > 0 and float(r[4]) >= 0 for r in rows)


def test_divergence_is_reported(tmp_path):
    cfg = small(method="dp-sgd", private=False, eta=1e200, prior="none")
    log = run_experiment(cfg, tmp_path)
    assert log.status == "failed"
    assert log.failed_step is not None and log.message
    assert io.read_json(tmp_path / "summary.json")["status"] == "failed"
    assert not (tmp_path / "predictions.csv").exists()


@pytest.mark.parametrize("method", ["dp-sgd", "dp-bbp", "dp-mc-dropout"])
def test_non_private_runs_draw_no_mechanism_noise(method):
    log = run_experiment(small(method=method, private=False, eta=0.05))
    assert log.streams_used["noise"] is False
    assert log.streams_used["batch"] is True
    private = run_experiment(small(method=method, eta=0.05))
    assert private.streams_used["noise"] is True


def test_non_private_sgld_keeps_langevin_noise():
    assert run_experiment(small(private=False)).streams_used["noise"] is True


def test_dropout_learning_rate_per_profile():
    assert preset("mnist-mlp-paper", "dp-mc-dropout").eta == 2e-4
    assert preset("blobs", "dp-mc-dropout").eta == 0.25
    assert preset("hetero-paper", "dp-mc-dropout").eta == 5e-5
