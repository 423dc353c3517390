import struct

import numpy as np
import pytest
from scipy.stats import norm

from dpbnn.data import (
    blob_means,
    export_classification_csv,
    export_regression_csv,
    generate_blobs,
    generate_heteroscedastic,
    heteroscedastic_covariance,
    load_mnist_idx,
    read_classification_csv,
    read_idx,
    read_regression_csv,
    sample_batch,
    sample_heteroscedastic_y,
    write_idx,
)
from dpbnn.errors import FormatError


def test_hetero_split_and_determinism():
    a = generate_heteroscedastic(400, seed=3)
    b = generate_heteroscedastic(400, seed=3)
    assert len(a.train) == 250 and len(a.test) == 150
    assert not set(a.train) & set(a.test)
    np.testing.assert_array_equal(a.y, b.y)
    assert np.all((a.x >= -3) & (a.x < 3))
    c = generate_heteroscedastic(40, seed=3)
    assert len(c.train) == 25 and len(c.test) == 15


def test_covariance_entries():
    cov = heteroscedastic_covariance(np.array([0.0, 0.0, 1.0]))
    assert cov[0, 0] == pytest.approx(1.36)
    assert cov[0, 1] == 1.0
    assert cov[0, 2] == pytest.approx(np.exp(-0.5))
    assert cov[2, 2] == pytest.approx(1 + 0.9**2)
    assert np.all(np.linalg.eigvalsh(cov) > 0)


def test_marginal_variance_at_zero_monte_carlo():
    ys = np.array([sample_heteroscedastic_y(np.array([0.0]), np.random.default_rng(s))[0] for s in range(5000)])
    assert abs(ys.var() / 1.36 - 1) < 0.1


def test_equal_inputs_are_correlated():
    x = np.array([0.5, 0.5])
    ys = np.array([sample_heteroscedastic_y(x, np.random.default_rng(s)) for s in range(3000)])
    assert np.corrcoef(ys.T)[0, 1] > 0.5


def test_jitter_rescues_singular_covariance():
    # noise vanishes at x = -2, so duplicated points make the matrix singular
    x = np.array([-2.0, -2.0, 1.0])
    assert np.linalg.matrix_rank(heteroscedastic_covariance(x)) < 3
    y = sample_heteroscedastic_y(x, np.random.default_rng(0))
    assert np.all(np.isfinite(y))


def _write_fixture(tmp_path, images, labels):
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    write_idx(ip, images)
    write_idx(lp, labels)
    return ip, lp


def test_idx_hand_crafted_fixture(tmp_path):
    img = np.zeros((2, 28, 28), dtype=np.uint8)
    img[1, 0, 0] = 255
    img[1, 27, 27] = 51
    # build the header by hand rather than through the writer
    ip = tmp_path / "img"
    ip.write_bytes(struct.pack(">IIII", 2051, 2, 28, 28) + img.tobytes())
    lp = tmp_path / "lab"
    lp.write_bytes(struct.pack(">II", 2049, 2) + bytes([3, 7]))
    ds = load_mnist_idx(ip, lp)
    assert ds.inputs.shape == (2, 784)
    assert ds.labels.tolist() == [3, 7]
    assert np.all(ds.inputs[0] == 0)
    assert ds.inputs[1, 0] == 1.0 and ds.inputs[1, 783] == pytest.approx(0.2)


def test_idx_writer_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(5, 4, 3), dtype=np.uint8)
    for name in ("a.idx", "a.idx.gz"):
        write_idx(tmp_path / name, img)
        np.testing.assert_array_equal(read_idx(tmp_path / name), img)
    raw = (tmp_path / "a.idx").read_bytes()
    assert raw[:4] == struct.pack(">I", 0x0803)


def test_idx_wrong_magic(tmp_path):
    ip, lp = _write_fixture(tmp_path, np.zeros((1, 2, 2), np.uint8), np.zeros(1, np.uint8))
    with pytest.raises(FormatError) as err:
        load_mnist_idx(lp, ip)
    assert err.value.offset == 0


def test_idx_truncated(tmp_path):
    p = tmp_path / "t"
    p.write_bytes(struct.pack(">IIII", 2051, 2, 2, 2) + bytes(5))
    with pytest.raises(FormatError) as err:
        read_idx(p, 2051)
    assert err.value.offset == 21
    p.write_bytes(struct.pack(">II", 2051, 2))
    with pytest.raises(FormatError):
        read_idx(p)


def test_idx_count_mismatch(tmp_path):
    ip, lp = _write_fixture(tmp_path, np.zeros((2, 2, 2), np.uint8), np.zeros(3, np.uint8))
    with pytest.raises(FormatError):
        load_mnist_idx(ip, lp)


def test_mnist_standardize(tmp_path):
    rng = np.random.default_rng(1)
    ip, lp = _write_fixture(tmp_path, rng.integers(0, 256, (50, 3, 3), dtype=np.uint8), np.zeros(50, np.uint8))
    x = load_mnist_idx(ip, lp, standardize=True).inputs
    np.testing.assert_allclose(x.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(x.std(axis=0), 1, atol=1e-12)


def test_blobs_single_class():
    assert np.all(generate_blobs(50, 1, 3, seed=0).labels == 0)


def test_blobs_label_balance():
    counts = np.bincount(generate_blobs(10_000, 4, 6, seed=2).labels)
    assert np.all(np.abs(counts / 2500 - 1) < 0.1)


def test_blobs_far_apart_threshold_classifier():
    train = generate_blobs(200, 2, 1, seed=0, separation=40.0)
    fresh = generate_blobs(2000, 2, 1, seed=1, separation=40.0)
    thresh = blob_means(2, 1, 40.0)[:, 0].mean()
    assert thresh == 0
    assert np.mean((fresh.inputs[:, 0] > thresh) == fresh.labels) == 1.0
    assert np.mean((train.inputs[:, 0] > thresh) == train.labels) == 1.0


@pytest.mark.parametrize("K,Q", [(10, 20), (4, 2)])
def test_blobs_bayes_accuracy_above_095(K, Q):
    # nearest-mean is Bayes optimal for equal-variance, equal-prior clusters
    ds = generate_blobs(20_000, K, Q, seed=5)
    means = blob_means(K, Q)
    d = ((ds.inputs[:, None, :] - means[None]) ** 2).sum(-1)
    assert np.mean(np.argmin(d, axis=1) == ds.labels) > 0.95
    # pairwise union bound for the orthogonal layout
    if Q >= K:
        assert 1 - (K - 1) * norm.cdf(-6.0 / 2) > 0.95


def test_sample_batch():
    rng = np.random.default_rng(0)
    assert sorted(sample_batch(7, 7, rng)) == list(range(7))
    for _ in range(50):
        assert len(set(sample_batch(100, 30, rng))) == 30
    with pytest.raises(ValueError):
        sample_batch(3, 4, rng)


def test_sample_batch_uniform_single():
    picks = [sample_batch(2, 1, np.random.default_rng(s))[0] for s in range(10_000)]
    assert abs(np.mean(picks) - 0.5) < 0.02


def test_csv_round_trips(tmp_path):
    reg = generate_heteroscedastic(20, seed=1)
    export_regression_csv(reg, tmp_path / "r.csv")
    back = read_regression_csv(tmp_path / "r.csv")
    np.testing.assert_array_equal(back.x, reg.x)
    np.testing.assert_array_equal(back.test, reg.test)
    clf = generate_blobs(30, 3, 4, seed=1)
    export_classification_csv(clf, tmp_path / "c.csv")
    back = read_classification_csv(tmp_path / "c.csv")
    np.testing.assert_array_equal(back.inputs, clf.inputs)
    np.testing.assert_array_equal(back.labels, clf.labels)
