"""Explicit dense feed-forward networks with softmax cross-entropy.

Each layer computes ``s_l = W_l a_{l-1}`` and ``a_l = phi_l(s_l)``, where
``a_{l-1}`` carries a trailing constant 1 so that ``W_l`` holds the bias
in its last column. All routines accept a single input vector or a batch
(``n x d``) and return batched arrays.

Parameters are flattened layer by layer, each layer column-major
(``vec(W)``), so that the derivative of ``W a`` with respect to ``vec(W)``
is ``kron(a, .)``. Every other module relies on this ordering.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import erf

from .errors import DimensionError, SizeError, ValidationError

ACTIVATIONS = ("relu", "gelu", "tanh", "identity")
JACOBIAN_GUARD = 20_000

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def activate(kind: str, s: np.ndarray) -> np.ndarray:
    if kind == "identity":
        return s
    if kind == "relu":
        return np.maximum(s, 0.0)
    if kind == "tanh":
        return np.tanh(s)
    if kind == "gelu":
        return 0.5 * s * (1.0 + erf(s / _SQRT2))
    raise ValidationError(f"unknown activation {kind!r}")


def activate_grad(kind: str, s: np.ndarray) -> np.ndarray:
    """Elementwise derivative; ReLU uses subgradient 0 at exactly 0."""
    if kind == "identity":
        return np.ones_like(s)
    if kind == "relu":
        return (s > 0).astype(s.dtype)
    if kind == "tanh":
        return 1.0 - np.tanh(s) ** 2
    if kind == "gelu":
        return 0.5 * (1.0 + erf(s / _SQRT2)) + s * _INV_SQRT_2PI * np.exp(-0.5 * s * s)
    raise ValidationError(f"unknown activation {kind!r}")


@dataclass
class Layer:
    W: np.ndarray
    activation: str = "identity"

    @property
    def d_out(self) -> int:
        return self.W.shape[0]

    @property
    def d_in(self) -> int:
        """Input width including the bias column."""
        return self.W.shape[1]


@dataclass
class FeedForwardNet:
    layers: list[Layer]

    def __post_init__(self):
        if not self.layers:
            raise ValidationError("a network needs at least one layer")
        for i, layer in enumerate(self.layers):
            layer.W = np.asarray(layer.W, dtype=np.float64)
            if layer.W.ndim != 2:
                raise DimensionError(f"layer {i} weight must be 2-D")
            if layer.activation not in ACTIVATIONS:
                raise ValidationError(f"layer {i}: unknown activation {layer.activation!r}")
            if i > 0 and layer.d_in != self.layers[i - 1].d_out + 1:
                raise DimensionError(
                    f"layer {i} expects {layer.d_in - 1} inputs but layer {i - 1} "
                    f"produces {self.layers[i - 1].d_out}"
                )

    @classmethod
    def random(
        cls,
        widths: Sequence[int],
        rng: np.random.Generator,
        hidden: str = "tanh",
        output: str = "identity",
        bias_scale: float = 0.0,
    ) -> "FeedForwardNet":
        """Gaussian init with variance ``1/fan_in``; ``widths = [d, h1, ..., m]``."""
        layers = []
        for i in range(len(widths) - 1):
            d_in, d_out = widths[i], widths[i + 1]
            W = np.empty((d_out, d_in + 1))
            W[:, :d_in] = rng.standard_normal((d_out, d_in)) / np.sqrt(d_in)
            W[:, d_in] = bias_scale * rng.standard_normal(d_out)
            act = output if i == len(widths) - 2 else hidden
            layers.append(Layer(W, act))
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].d_in - 1

    @property
    def n_classes(self) -> int:
        return self.layers[-1].d_out

    @property
    def n_params(self) -> int:
        return sum(layer.W.size for layer in self.layers)

    def layer_sizes(self, layers: Sequence[int] | None = None) -> list[int]:
        idx = range(len(self.layers)) if layers is None else layers
        return [self.layers[i].W.size for i in idx]

    def copy(self) -> "FeedForwardNet":
        return FeedForwardNet([Layer(l.W.copy(), l.activation) for l in self.layers])

    def architecture(self) -> list[tuple[int, int, str]]:
        return [(l.d_out, l.d_in, l.activation) for l in self.layers]

    def flat_params(self, layers: Sequence[int] | None = None) -> np.ndarray:
        idx = range(len(self.layers)) if layers is None else layers
        return flatten([self.layers[i].W for i in idx])

    def set_flat_params(self, theta: np.ndarray, layers: Sequence[int] | None = None) -> None:
        idx = list(range(len(self.layers))) if layers is None else list(layers)
        mats = unflatten(theta, [self.layers[i].W.shape for i in idx])
        for i, W in zip(idx, mats):
            self.layers[i].W = W

    def with_flat_params(self, theta: np.ndarray, layers: Sequence[int] | None = None) -> "FeedForwardNet":
        net = self.copy()
        net.set_flat_params(theta, layers)
        return net


def flatten(mats: Sequence[np.ndarray]) -> np.ndarray:
    """Concatenate column-major vectorizations."""
    if not mats:
        return np.zeros(0)
    return np.concatenate([np.asarray(M).ravel(order="F") for M in mats])


def unflatten(theta: np.ndarray, shapes: Sequence[tuple[int, int]]) -> list[np.ndarray]:
    theta = np.asarray(theta, dtype=np.float64)
    total = sum(r * c for r, c in shapes)
    if theta.shape != (total,):
        raise DimensionError(f"expected flat vector of length {total}, got shape {theta.shape}")
    out, pos = [], 0
    for r, c in shapes:
        out.append(theta[pos:pos + r * c].reshape((r, c), order="F").copy())
        pos += r * c
    return out


@dataclass
class ForwardTrace:
    """Batched forward pass.

    ``inputs[l]`` is the bias-augmented input of layer ``l`` (so
    ``inputs[0]`` is the augmented data), ``preacts[l]`` its preactivation.
    """

    inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    logits: np.ndarray
    probs: np.ndarray
    single: bool = field(default=False, repr=False)


def _augment(a: np.ndarray) -> np.ndarray:
    return np.hstack([a, np.ones((a.shape[0], 1))])


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def logsumexp(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=-1)
    return zmax + np.log(np.exp(z - zmax[..., None]).sum(axis=-1))


def forward(net: FeedForwardNet, x: np.ndarray) -> ForwardTrace:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != net.input_dim:
        raise DimensionError(f"network expects inputs of width {net.input_dim}, got shape {x.shape}")
    inputs, preacts = [], []
    a = X
    for layer in net.layers:
        a_aug = _augment(a)
        s = a_aug @ layer.W.T
        inputs.append(a_aug)
        preacts.append(s)
        a = activate(layer.activation, s)
    return ForwardTrace(inputs, preacts, a, softmax(a), single)


def _check_labels(y: np.ndarray, m: int) -> np.ndarray:
    y = np.atleast_1d(np.asarray(y))
    if not np.issubdtype(y.dtype, np.integer):
        if np.any(y != np.round(y)):
            raise ValidationError("labels must be integers")
        y = y.astype(np.int64)
    if np.any(y < 0) or np.any(y >= m):
        raise ValidationError(f"label out of range [0, {m})")
    return y


def cross_entropy(trace: ForwardTrace, y: np.ndarray) -> np.ndarray:
    """Per-example loss ``logsumexp(z) - z_y``."""
    y = _check_labels(y, trace.logits.shape[1])
    z = trace.logits
    return logsumexp(z) - z[np.arange(z.shape[0]), y]


def backprop_preacts(net: FeedForwardNet, trace: ForwardTrace, dlogits: np.ndarray) -> list[np.ndarray]:
    """Backpropagate output gradients to every layer's preactivation.

    ``dlogits`` has shape ``(n, m)`` or ``(n, r, m)``; in the latter case
    ``r`` output directions are propagated per example at once (used for
    Jacobians). Returns a list of arrays shaped like ``dlogits`` with the
    last axis replaced by each layer's output width.
    """
    L = len(net.layers)
    deltas: list[np.ndarray] = [None] * L  # type: ignore[list-item]
    extra = dlogits.ndim == 3
    d = dlogits
    for l in range(L - 1, -1, -1):
        layer = net.layers[l]
        dphi = activate_grad(layer.activation, trace.preacts[l])
        d = d * (dphi[:, None, :] if extra else dphi)
        deltas[l] = d
        if l > 0:
            # drop the bias column: it has no upstream dependency
            d = d @ layer.W[:, :-1]
    return deltas


def layer_grads_from_deltas(trace: ForwardTrace, deltas: list[np.ndarray], layers: Sequence[int] | None = None) -> list[np.ndarray]:
    """Mean over the batch of ``delta_l a_{l-1}^T``."""
    idx = range(len(deltas)) if layers is None else layers
    n = trace.inputs[0].shape[0]
    return [deltas[l].T @ trace.inputs[l] / n for l in idx]


def backward(net: FeedForwardNet, trace: ForwardTrace, y, layers: Sequence[int] | None = None) -> list[np.ndarray]:
    """Gradient of the batch-mean cross-entropy w.r.t. each layer's weights."""
    y = _check_labels(y, net.n_classes)
    n = trace.logits.shape[0]
    if y.shape[0] != n:
        raise DimensionError(f"{y.shape[0]} labels for {n} examples")
    dlogits = trace.probs.copy()
    dlogits[np.arange(n), y] -= 1.0
    return layer_grads_from_deltas(trace, backprop_preacts(net, trace, dlogits), layers)


def loss_and_grad(net: FeedForwardNet, X: np.ndarray, y, layers: Sequence[int] | None = None) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its flattened gradient over ``layers``."""
    trace = forward(net, X)
    loss = float(np.mean(cross_entropy(trace, y)))
    return loss, flatten(backward(net, trace, y, layers))


def sample_pseudo_gradient(net: FeedForwardNet, trace: ForwardTrace, rng: np.random.Generator,
                           labels: np.ndarray | None = None) -> list[np.ndarray]:
    """Per-example ``grad_{s_l} log p(yhat | x)`` with ``yhat ~ softmax(logits)``.

    When ``labels`` is given those labels replace the samples (empirical
    Fisher). Returns one ``(n, d_out_l)`` array per layer.
    """
    probs = trace.probs
    n, m = probs.shape
    if labels is None:
        yhat = sample_labels(probs, rng)
    else:
        yhat = _check_labels(labels, m)
    dlogp = -probs.copy()
    dlogp[np.arange(n), yhat] += 1.0
    return backprop_preacts(net, trace, dlogp)


def sample_labels(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw of one class per row."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0])[:, None] * cdf[:, -1:]
    return np.minimum((u >= cdf).sum(axis=1), probs.shape[1] - 1)


def per_example_jacobians(net: FeedForwardNet, X: np.ndarray, layers: Sequence[int] | None = None) -> np.ndarray:
    """Logit Jacobians for a batch, shape ``(n, m, p_tracked)``."""
    idx = list(range(len(net.layers))) if layers is None else list(layers)
    p = sum(net.layers[l].W.size for l in idx)
    if p > JACOBIAN_GUARD:
        raise SizeError(f"Jacobian over {p} parameters exceeds the guard of {JACOBIAN_GUARD}")
    trace = forward(net, X)
    n, m = trace.logits.shape
    seeds = np.broadcast_to(np.eye(m), (n, m, m))
    deltas = backprop_preacts(net, trace, seeds)
    blocks = []
    for l in idx:
        a = trace.inputs[l]
        # column-major vec(delta a^T) = kron(a, delta)
        blocks.append(np.einsum("nj,nri->nrji", a, deltas[l]).reshape(n, m, -1))
    return np.concatenate(blocks, axis=2)


def per_example_jacobian(net: FeedForwardNet, x: np.ndarray, layers: Sequence[int] | None = None) -> np.ndarray:
    """``m x p`` Jacobian of the logits for one input."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError("per_example_jacobian takes a single input vector")
    return per_example_jacobians(net, x[None, :], layers)[0]


def hessian_vector_product(net: FeedForwardNet, X: np.ndarray, y, v: np.ndarray,
                           layers: Sequence[int] | None = None) -> np.ndarray:
    """Capability-loss Hessian times ``v`` by central differences of the gradient.

    The step is ``1e-4 / max(1, |v|)``; ``v`` and the result live in the
    flattened coordinates of ``layers``.
    """
    theta = net.flat_params(layers)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != theta.shape:
        raise DimensionError(f"direction has shape {v.shape}, expected {theta.shape}")
    if not np.any(v):
        return np.zeros_like(v)
    h = 1e-4 / max(1.0, float(np.linalg.norm(v)))
    work = net.copy()
    work.set_flat_params(theta + h * v, layers)
    _, g_plus = loss_and_grad(work, X, y, layers)
    work.set_flat_params(theta - h * v, layers)
    _, g_minus = loss_and_grad(work, X, y, layers)
    return (g_plus - g_minus) / (2.0 * h)


def predict(net: FeedForwardNet, X: np.ndarray) -> np.ndarray:
    return np.argmax(forward(net, X).logits, axis=1)


def accuracy(net: FeedForwardNet, X: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return 0.0
    return float(np.mean(predict(net, X) == np.asarray(y)))
