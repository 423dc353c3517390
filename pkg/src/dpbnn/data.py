"""Datasets: heteroscedastic GP regression, MNIST IDX files, Gaussian blobs.

Also the minibatch sampler used by every training loop: each step draws a
uniformly random subset of fixed size, independently of earlier steps.
"""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError, cholesky

from .errors import FormatError, NumericError

JITTER = 1e-8
IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049
_IDX_UBYTE = 0x08


@dataclass(frozen=True)
class RegressionDataset:
    x: np.ndarray
    y: np.ndarray
    train: np.ndarray
    test: np.ndarray

    @property
    def x_train(self):
        return self.x[self.train, None]

    @property
    def y_train(self):
        return self.y[self.train]

    @property
    def x_test(self):
        return self.x[self.test, None]

    @property
    def y_test(self):
        return self.y[self.test]


@dataclass(frozen=True)
class ClassificationDataset:
    inputs: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0


# ---------------------------------------------------------------- regression


def rbf_kernel(x, lengthscale: float = 1.0) -> np.ndarray:
    """``exp(-(x - x')^2 / (2 l^2))`` with unit variance."""
    d = np.subtract.outer(x, x)
    return np.exp(-0.5 * (d / lengthscale) ** 2)


def heteroscedastic_covariance(x, lengthscale: float = 1.0) -> np.ndarray:
    """RBF kernel plus input-dependent noise ``diag((0.3 x + 0.6)^2)``."""
    x = np.asarray(x, dtype=np.float64)
    return rbf_kernel(x, lengthscale) + np.diag((0.3 * x + 0.6) ** 2)


def _cholesky_with_jitter(cov):
    if not np.array_equal(cov, cov.T):
        raise NumericError("covariance is not symmetric")
    try:
        return cholesky(cov, lower=True)
    except LinAlgError:
        pass
    try:
        return cholesky(cov + JITTER * np.eye(len(cov)), lower=True)
    except LinAlgError as err:
        raise NumericError("covariance is not positive definite even with jitter") from err


def sample_heteroscedastic_y(x, rng, lengthscale: float = 1.0) -> np.ndarray:
    """One draw of ``y ~ N(0, K_rbf + diag((0.3 x + 0.6)^2))`` at inputs ``x``."""
    L = _cholesky_with_jitter(heteroscedastic_covariance(x, lengthscale))
    return L @ rng.standard_normal(len(L))


def train_size(n: int) -> int:
    """250 of 400 points are for training; other ``n`` keep that ratio."""
    return min(max(int(round(n * 250 / 400)), 1), n - 1)


def generate_heteroscedastic(n: int = 400, seed=0, lengthscale: float = 1.0) -> RegressionDataset:
    """Heteroscedastic GP regression data.

    ``x ~ Uniform(-3, 3)`` iid and ``y`` is one draw of a zero-mean Gaussian
    with covariance ``K_rbf(x, x') + diag((0.3 x + 0.6)^2)``.  The first
    ``train_size(n)`` points form the training split.
    """
    if n < 2:
        raise ValueError("need at least two points")
    rng = np.random.default_rng(seed)
    x = rng.uniform(-3.0, 3.0, size=n)
    y = sample_heteroscedastic_y(x, rng, lengthscale)
    m = train_size(n)
    return RegressionDataset(x, y, np.arange(m), np.arange(m, n))


# ---------------------------------------------------------------- IDX / MNIST


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path, expected_magic=None) -> np.ndarray:
    """Read an unsigned-byte IDX file into an ``uint8`` array."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError("file too short for IDX magic", offset=len(raw))
    magic = struct.unpack(">I", raw[:4])[0]
    if expected_magic is not None and magic != expected_magic:
        raise FormatError(f"bad magic number {magic}, expected {expected_magic}", offset=0)
    if magic >> 16 != 0 or (magic >> 8) & 0xFF != _IDX_UBYTE:
        raise FormatError(f"unsupported IDX magic {magic:#010x}", offset=0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"truncated header: need {header} bytes, got {len(raw)}", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims, dtype=np.int64))
    if len(raw) < header + size:
        raise FormatError(f"truncated data: need {header + size} bytes, got {len(raw)}", offset=len(raw))
    if len(raw) > header + size:
        raise FormatError("trailing bytes after IDX payload", offset=header + size)
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def write_idx(path, array) -> None:
    """Write a ``uint8`` array in IDX format (magic ``0x0000 08 ndim``)."""
    a = np.asarray(array)
    if a.dtype != np.uint8:
        raise ValueError("IDX writer only supports uint8 data")
    header = struct.pack(">I", (_IDX_UBYTE << 8) | a.ndim) + struct.pack(f">{a.ndim}I", *a.shape)
    opener = gzip.open if Path(path).suffix == ".gz" else open
    with opener(path, "wb") as fh:
        fh.write(header + np.ascontiguousarray(a).tobytes())


def load_mnist_idx(images_path, labels_path, standardize: bool = False) -> ClassificationDataset:
    """Load an MNIST image/label pair.

    Pixels are flattened and divided by 255.  ``standardize=True``
    additionally centres and scales every pixel column to unit variance
    (constant columns are only centred).
    """
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels", offset=4)
    x = images.reshape(len(images), -1).astype(np.float64) / 255.0
    if standardize:
        sd = x.std(axis=0)
        x = (x - x.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    return ClassificationDataset(x, labels.astype(np.int64))


# ---------------------------------------------------------------- blobs


def blob_means(K: int, Q: int, separation: float = 6.0) -> np.ndarray:
    """Cluster centres ``separation`` apart.

    With ``Q >= K`` the centres are ``separation / sqrt(2)`` times distinct
    unit vectors (pairwise distance ``separation``); otherwise they sit on a
    line along the first axis with spacing ``separation``.
    """
    means = np.zeros((K, Q))
    if Q >= K:
        means[np.arange(K), np.arange(K)] = separation / np.sqrt(2.0)
    else:
        means[:, 0] = separation * (np.arange(K) - (K - 1) / 2)
    return means


def generate_blobs(n: int, K: int, Q: int, seed=0, separation: float = 6.0) -> ClassificationDataset:
    """``K`` unit-variance Gaussian clusters in ``Q`` dimensions, uniform labels."""
    if n < K or K < 1 or Q < 1:
        raise ValueError("need n >= K >= 1 and Q >= 1")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, K, size=n)
    x = blob_means(K, Q, separation)[labels] + rng.standard_normal((n, Q))
    return ClassificationDataset(x, labels.astype(np.int64))


# ---------------------------------------------------------------- batches


def sample_batch(n: int, batch_size: int, rng) -> np.ndarray:
    """``batch_size`` distinct indices from ``range(n)``, uniform over subsets."""
    if not 1 <= batch_size <= n:
        raise ValueError(f"need 1 <= batch_size <= n, got {batch_size}, {n}")
    return rng.choice(n, size=batch_size, replace=False)


# ---------------------------------------------------------------- CSV


def export_regression_csv(ds: RegressionDataset, path) -> None:
    split = np.empty(len(ds.x), dtype=object)
    split[ds.train] = "train"
    split[ds.test] = "test"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "split"])
        for row in zip(ds.x, ds.y, split):
            w.writerow([repr(float(row[0])), repr(float(row[1])), row[2]])


def read_regression_csv(path) -> RegressionDataset:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    x = np.array([float(r["x"]) for r in rows])
    y = np.array([float(r["y"]) for r in rows])
    split = np.array([r.get("split", "train") for r in rows])
    return RegressionDataset(x, y, np.flatnonzero(split == "train"), np.flatnonzero(split == "test"))


def export_classification_csv(ds: ClassificationDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j}" for j in range(ds.inputs.shape[1])] + ["label"])
        for xi, yi in zip(ds.inputs, ds.labels):
            w.writerow([repr(float(v)) for v in xi] + [int(yi)])


def read_classification_csv(path) -> ClassificationDataset:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return ClassificationDataset(data[:, :-1], data[:, -1].astype(np.int64))
