"""Dense ReLU networks with per-sample backpropagation.

All parameters live in one flat float64 vector.  The layout is layer-major,
with each layer's weight matrix (``out x in``, row-major) followed by its bias,
so gradient vectors from every optimizer line up coordinate by coordinate.

Two heads are supported:

``"classification"``
    ``K`` logits, trained with softmax cross-entropy.
``"regression"``
    two outputs ``(y_hat, log_var)``, trained with the heteroscedastic
    Gaussian negative log-likelihood ``0.5 * (log_var + (y - y_hat)**2 / exp(log_var))``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax, softmax

from .errors import NumericError, ShapeError

HEADS = ("classification", "regression")

# Bound on chunk_size * d (float64 entries) when materialising per-sample gradients.
_MAX_CHUNK_ENTRIES = 2**24


@dataclass
class Network:
    """A multilayer perceptron stored as a flat parameter vector.

    Parameters
    ----------
    sizes : tuple of int
        Layer widths ``(input, hidden_1, ..., output)``.  For the regression
        head the output width must be 2.
    head : str
        ``"classification"`` or ``"regression"``.
    params : ndarray, optional
        Flat parameter vector of length ``d``; zeros when omitted.
    """

    sizes: tuple
    head: str = "classification"
    params: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        if len(self.sizes) < 2 or min(self.sizes) < 1:
            raise ShapeError(f"invalid layer sizes {self.sizes}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}; expected one of {HEADS}")
        if self.head == "regression" and self.sizes[-1] != 2:
            raise ShapeError("regression head needs exactly 2 outputs (y_hat, log_var)")
        if self.params is None:
            self.params = np.zeros(self.num_params)
        else:
            self.params = np.ascontiguousarray(self.params, dtype=np.float64)
            if self.params.shape != (self.num_params,):
                raise ShapeError(
                    f"expected {self.num_params} parameters, got shape {self.params.shape}"
                )

    @property
    def num_params(self) -> int:
        return sum(o * i + o for i, o in zip(self.sizes[:-1], self.sizes[1:]))

    @property
    def d(self) -> int:
        return self.num_params

    @property
    def hidden_sizes(self) -> tuple:
        return self.sizes[1:-1]

    def layer_slices(self):
        """Yield ``(weight_slice, bias_slice, (out, in))`` for every layer."""
        pos = 0
        for n_in, n_out in zip(self.sizes[:-1], self.sizes[1:]):
            w = slice(pos, pos + n_out * n_in)
            pos += n_out * n_in
            b = slice(pos, pos + n_out)
            pos += n_out
            yield w, b, (n_out, n_in)

    def layers(self, params=None):
        """Return ``[(W, b), ...]`` as views into ``params`` (default: own)."""
        p = self.params if params is None else params
        return [(p[w].reshape(shape), p[b]) for w, b, shape in self.layer_slices()]

    def with_params(self, params) -> "Network":
        return Network(self.sizes, self.head, np.array(params, dtype=np.float64))

    def copy(self) -> "Network":
        return self.with_params(self.params.copy())


def init_network(sizes, head="classification", rng=None, output_scale: float = 1.0) -> Network:
    """Fan-in scaled uniform init: weights in ``±sqrt(6 / fan_in)``, zero biases.

    ``output_scale`` shrinks the last layer's range, which keeps the initial
    log-variance of a regression head near zero.
    """
    rng = np.random.default_rng(rng)
    net = Network(sizes, head)
    layers = list(net.layer_slices())
    for k, (w, _, (n_out, n_in)) in enumerate(layers):
        bound = np.sqrt(6.0 / n_in) * (output_scale if k == len(layers) - 1 else 1.0)
        net.params[w] = rng.uniform(-bound, bound, size=n_out * n_in)
    return net


def _check_inputs(net, inputs):
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.sizes[0]:
        raise ShapeError(f"input of shape {np.shape(inputs)} does not match input width {net.sizes[0]}")
    return x


def _check_masks(net, masks):
    if masks is None:
        return [None] * len(net.hidden_sizes)
    masks = list(masks)
    if len(masks) != len(net.hidden_sizes):
        raise ShapeError(f"expected {len(net.hidden_sizes)} dropout masks, got {len(masks)}")
    for m, h in zip(masks, net.hidden_sizes):
        if m is not None and np.shape(m)[-1] != h:
            raise ShapeError(f"mask width {np.shape(m)[-1]} does not match hidden width {h}")
    return masks


def _forward_cache(net, x, masks, params=None):
    """Forward pass keeping layer inputs and ReLU gates for backprop."""
    layers = net.layers(params)
    acts = [x]
    gates = []
    a = x
    for (W, b), m in zip(layers[:-1], masks):
        z = a @ W.T + b
        gate = (z > 0).astype(np.float64)
        if m is not None:
            gate = gate * m
        a = z * gate
        gates.append(gate)
        acts.append(a)
    W, b = layers[-1]
    return a @ W.T + b, acts, gates


def forward(net: Network, inputs, masks=None, params=None) -> np.ndarray:
    """Evaluate the network.

    ``masks`` holds one (already rescaled) multiplier per hidden layer, applied
    after the ReLU; each may be a vector shared by all rows or a per-row matrix.
    Returns logits ``(B, K)`` or regression outputs ``(B, 2)`` with columns
    ``(y_hat, log_var)``.
    """
    x = _check_inputs(net, inputs)
    out, _, _ = _forward_cache(net, x, _check_masks(net, masks), params)
    return out


def predict_proba(net: Network, inputs, masks=None, params=None) -> np.ndarray:
    if net.head != "classification":
        raise ValueError("predict_proba needs a classification head")
    return softmax(forward(net, inputs, masks, params), axis=1)


def _loss_and_output_grad(head, out, targets):
    """Per-sample losses and d loss / d output for each row."""
    if head == "classification":
        y = np.asarray(targets, dtype=np.int64)
        logp = log_softmax(out, axis=1)
        rows = np.arange(len(y))
        losses = -logp[rows, y]
        grad = np.exp(logp)
        grad[rows, y] -= 1.0
        return losses, grad
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    mean, log_var = out[:, 0], out[:, 1]
    inv_var = np.exp(-log_var)
    resid = y - mean
    losses = 0.5 * (log_var + resid**2 * inv_var)
    grad = np.empty_like(out)
    grad[:, 0] = -resid * inv_var
    grad[:, 1] = 0.5 * (1.0 - resid**2 * inv_var)
    return losses, grad


def per_sample_losses(net: Network, inputs, targets, masks=None, params=None) -> np.ndarray:
    x = _check_inputs(net, inputs)
    out = forward(net, x, masks, params)
    losses, _ = _loss_and_output_grad(net.head, out, targets)
    return losses


def mean_loss(net: Network, inputs, targets, masks=None, params=None) -> float:
    return float(np.mean(per_sample_losses(net, inputs, targets, masks, params)))


@dataclass
class Batch:
    """A minibatch: inputs ``(B, Q)``, targets, and the dataset rows they came from."""

    inputs: np.ndarray
    targets: np.ndarray
    indices: np.ndarray = None

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.targets = np.asarray(self.targets)
        if len(self.inputs) < 1 or len(self.targets) != len(self.inputs):
            raise ShapeError("batch needs at least one row and one target per row")
        if self.indices is not None:
            self.indices = np.asarray(self.indices)
            if len(np.unique(self.indices)) != len(self.indices):
                raise ValueError("batch indices must be distinct")

    def __len__(self):
        return len(self.inputs)

    @classmethod
    def take(cls, inputs, targets, indices) -> "Batch":
        return cls(inputs[indices], targets[indices], indices)


@dataclass
class PerSampleGradients:
    """One flat gradient row per example, in batch order."""

    grads: np.ndarray
    per_sample_losses: np.ndarray

    def __len__(self):
        return len(self.grads)

    def mean(self) -> np.ndarray:
        return self.grads.mean(axis=0)


def _backprop(net, x, targets, masks, params=None):
    out, acts, gates = _forward_cache(net, x, masks, params)
    losses, delta = _loss_and_output_grad(net.head, out, targets)
    bad = ~np.isfinite(losses)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise NumericError(f"non-finite loss for sample {i}", index=i)
    layers = net.layers(params)
    # (delta, layer input) pairs, output layer first
    pairs = []
    for k in range(len(layers) - 1, -1, -1):
        pairs.append((delta, acts[k]))
        if k > 0:
            delta = (delta @ layers[k][0]) * gates[k - 1]
    pairs.reverse()
    return losses, pairs


def per_sample_backward(net: Network, inputs, targets, masks=None, params=None) -> PerSampleGradients:
    """Gradients of each example's loss with respect to the flat parameters.

    Row ``i`` of the result is ``d loss_i / d params`` in the flat layout.
    """
    x = _check_inputs(net, inputs)
    losses, pairs = _backprop(net, x, targets, _check_masks(net, masks), params)
    grads = np.empty((len(x), net.num_params))
    for (w, b, _), (delta, a_in) in zip(net.layer_slices(), pairs):
        grads[:, w] = np.einsum("bo,bi->boi", delta, a_in).reshape(len(x), -1)
        grads[:, b] = delta
    if not np.all(np.isfinite(grads)):
        i = int(np.flatnonzero(~np.isfinite(grads).all(axis=1))[0])
        raise NumericError(f"non-finite gradient for sample {i}", index=i)
    return PerSampleGradients(grads, losses)


def batch_gradient(net: Network, inputs, targets, masks=None, params=None):
    """Gradient of the mean loss and the mean loss, without per-sample storage."""
    x = _check_inputs(net, inputs)
    losses, pairs = _backprop(net, x, targets, _check_masks(net, masks), params)
    g = np.empty(net.num_params)
    for (w, b, _), (delta, a_in) in zip(net.layer_slices(), pairs):
        g[w] = (delta.T @ a_in).ravel()
        g[b] = delta.sum(axis=0)
    return g / len(x), float(losses.mean())


def reweighted_gradient_sum(net: Network, inputs, targets, weight_fn, masks=None, params=None):
    """``sum_i weight_fn(norms)_i * g_i`` without forming the per-sample rows.

    Each example's gradient in a dense layer is the outer product of its
    output delta and its layer input, so its squared norm is
    ``|delta|^2 (|a|^2 + 1)`` (the ``+ 1`` is the bias) and the weighted sum is
    one matrix product per layer.  Returns ``(weighted_sum, losses, norms)``.
    """
    x = _check_inputs(net, inputs)
    losses, pairs = _backprop(net, x, targets, _check_masks(net, masks), params)
    sq = np.zeros(len(x))
    for delta, a_in in pairs:
        sq += np.einsum("bo,bo->b", delta, delta) * (np.einsum("bi,bi->b", a_in, a_in) + 1.0)
    norms = np.sqrt(sq)
    if not np.all(np.isfinite(norms)):
        i = int(np.flatnonzero(~np.isfinite(norms))[0])
        raise NumericError(f"non-finite gradient for sample {i}", index=i)
    f = np.asarray(weight_fn(norms), dtype=np.float64)
    g = np.empty(net.num_params)
    for (w, b, _), (delta, a_in) in zip(net.layer_slices(), pairs):
        fd = delta * f[:, None]
        g[w] = (fd.T @ a_in).ravel()
        g[b] = fd.sum(axis=0)
    return g, losses, norms


def iter_per_sample_chunks(net: Network, inputs, targets, masks=None, params=None):
    """Yield :class:`PerSampleGradients` over consecutive chunks of the batch.

    Chunks are sized so that no more than ``2**24`` gradient entries are held
    at once; concatenating the chunks gives :func:`per_sample_backward`.
    """
    x = _check_inputs(net, inputs)
    y = np.asarray(targets)
    step = max(1, _MAX_CHUNK_ENTRIES // net.num_params)
    masks = _check_masks(net, masks)
    for start in range(0, len(x), step):
        sl = slice(start, start + step)
        m = [mm[sl] if mm is not None and np.ndim(mm) == 2 else mm for mm in masks]
        try:
            yield per_sample_backward(net, x[sl], y[sl], m, params)
        except NumericError as err:
            i = start + (err.index or 0)
            raise NumericError(f"non-finite loss or gradient for sample {i}", index=i) from err
