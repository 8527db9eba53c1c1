"""Curvature models of the capability loss.

Five models share one interface: the exact Hessian and the exact
Gauss-Newton Hessian (dense, over the flattened tracked parameters),
K-FAC and eigenvalue-corrected K-FAC (per-layer Kronecker factors), and
the activation covariance alone (input-side only, output side identity).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from . import network as nw
from .errors import DimensionError, SizeError, StateError, ValidationError
from .linalg import sym_eig
from .network import FeedForwardNet

HESSIAN_GUARD = 5_000
GNH_GUARD = 20_000


def _resolve_layers(net: FeedForwardNet, layers: Sequence[int] | None) -> tuple[int, ...]:
    if layers is None:
        return tuple(range(len(net.layers)))
    out = tuple(int(l) for l in layers)
    if not out or len(set(out)) != len(out):
        raise ValidationError(f"tracked layers must be a non-empty list of distinct indices, got {layers!r}")
    for l in out:
        if not 0 <= l < len(net.layers):
            raise ValidationError(f"layer index {l} outside [0, {len(net.layers)})")
    return tuple(sorted(out))


def _check_data(X: np.ndarray, y: np.ndarray | None = None) -> None:
    if X is None or len(X) == 0:
        raise ValidationError("dataset is empty")
    if y is not None and len(y) != len(X):
        raise DimensionError(f"{len(X)} inputs but {len(y)} labels")


@dataclass
class LayerFactors:
    A: np.ndarray  # d_in x d_in, bias column included
    S: np.ndarray  # d_out x d_out
    count: int

    @property
    def d_in(self) -> int:
        return self.A.shape[0]

    @property
    def d_out(self) -> int:
        return self.S.shape[0]


@dataclass
class KfacFactors:
    """Per-layer uncentered covariances keyed by layer index."""

    layers: dict[int, LayerFactors]

    @property
    def sample_count(self) -> int:
        counts = {f.count for f in self.layers.values()}
        return max(counts) if counts else 0

    def copy(self) -> "KfacFactors":
        return KfacFactors({l: LayerFactors(f.A.copy(), f.S.copy(), f.count) for l, f in self.layers.items()})


@dataclass
class ExactHessian:
    H: np.ndarray
    layers: tuple[int, ...]
    shapes: tuple[tuple[int, int], ...]

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(r * c for r, c in self.shapes)


@dataclass
class GNH:
    G: np.ndarray
    layers: tuple[int, ...]
    shapes: tuple[tuple[int, int], ...]

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(r * c for r, c in self.shapes)


@dataclass
class KFAC:
    factors: KfacFactors

    @property
    def layers(self) -> tuple[int, ...]:
        return tuple(sorted(self.factors.layers))


@dataclass
class EkfacLayer:
    U_out: np.ndarray
    U_in: np.ndarray
    lam_star: np.ndarray  # d_out x d_in corrected eigenvalues
    lam_out: np.ndarray
    lam_in: np.ndarray


@dataclass
class EKFAC:
    factors: KfacFactors
    corrections: dict[int, EkfacLayer]

    @property
    def layers(self) -> tuple[int, ...]:
        return tuple(sorted(self.corrections))


@dataclass
class ActivationCov:
    A: dict[int, np.ndarray]
    d_out: dict[int, int]

    @property
    def layers(self) -> tuple[int, ...]:
        return tuple(sorted(self.A))


CurvatureModel = Union[ExactHessian, GNH, KFAC, EKFAC, ActivationCov]

KIND_NAMES = {
    ExactHessian: "hessian",
    GNH: "gnh",
    KFAC: "kfac",
    EKFAC: "ekfac",
    ActivationCov: "actcov",
}


def kind_of(model: CurvatureModel) -> str:
    return KIND_NAMES[type(model)]


def model_layers(model: CurvatureModel) -> tuple[int, ...]:
    return tuple(model.layers)


# --------------------------------------------------------------------- dense


def exact_hessian(net: FeedForwardNet, X: np.ndarray, y: np.ndarray,
                  layers: Sequence[int] | None = None) -> ExactHessian:
    """Hessian of the mean capability loss, one HVP per basis vector."""
    _check_data(X, y)
    idx = _resolve_layers(net, layers)
    shapes = tuple(net.layers[l].W.shape for l in idx)
    p = sum(r * c for r, c in shapes)
    if p > HESSIAN_GUARD:
        raise SizeError(f"exact Hessian over {p} parameters exceeds the guard of {HESSIAN_GUARD}")
    H = np.empty((p, p))
    e = np.zeros(p)
    for j in range(p):
        e[j] = 1.0
        H[:, j] = nw.hessian_vector_product(net, X, y, e, idx)
        e[j] = 0.0
    return ExactHessian(0.5 * (H + H.T), idx, shapes)


def output_hessian_root(probs: np.ndarray) -> np.ndarray:
    """``B`` with ``B B^T = diag(pi) - pi pi^T`` for each row of ``probs``."""
    r = np.sqrt(probs)
    m = probs.shape[1]
    # diag(r) (I - r r^T): (I - r r^T) is idempotent because |r| = 1
    centered = np.eye(m)[None] - r[:, :, None] * r[:, None, :]
    return r[:, :, None] * centered


def exact_gnh(net: FeedForwardNet, X: np.ndarray, layers: Sequence[int] | None = None,
              batch: int = 256) -> GNH:
    """Mean over inputs of ``J^T (diag(pi) - pi pi^T) J``."""
    _check_data(X)
    idx = _resolve_layers(net, layers)
    shapes = tuple(net.layers[l].W.shape for l in idx)
    p = sum(r * c for r, c in shapes)
    if p > GNH_GUARD:
        raise SizeError(f"GNH over {p} parameters exceeds the guard of {GNH_GUARD}")
    X = np.asarray(X, dtype=np.float64)
    G = np.zeros((p, p))
    for start in range(0, len(X), batch):
        xb = X[start:start + batch]
        J = nw.per_example_jacobians(net, xb, idx)  # n, m, p
        probs = nw.forward(net, xb).probs
        B = output_hessian_root(probs)  # n, m, m
        R = np.einsum("nki,nkp->nip", B, J).reshape(-1, p)
        G += R.T @ R
    G /= len(X)
    return GNH(0.5 * (G + G.T), idx, shapes)


def mc_fisher(net: FeedForwardNet, X: np.ndarray, n_samples: int, rng: np.random.Generator,
              layers: Sequence[int] | None = None) -> np.ndarray:
    """Monte Carlo Fisher ``E[grad log p(yhat|x) grad log p(yhat|x)^T]`` with ``yhat ~ p(.|x)``.

    Draws ``n_samples`` labels per input. Per input, the estimate depends on
    the draws only through per-class counts, so the outer products are
    accumulated class-wise rather than sample by sample.
    """
    _check_data(X)
    if n_samples < 1:
        raise ValidationError("n_samples must be at least 1")
    idx = _resolve_layers(net, layers)
    X = np.asarray(X, dtype=np.float64)
    J = nw.per_example_jacobians(net, X, idx)  # n, m, p
    probs = nw.forward(net, X).probs
    n, m, p = J.shape
    F = np.zeros((p, p))
    for i in range(n):
        draws = nw.sample_labels(np.broadcast_to(probs[i], (n_samples, m)), rng)
        freq = np.bincount(draws, minlength=m) / n_samples
        R = (np.eye(m) - probs[i]) @ J[i]  # row c: grad log p(c | x)
        F += R.T @ (freq[:, None] * R)
    return 0.5 * (F + F.T) / n


# -------------------------------------------------------------------- K-FAC


def kfac_estimate(net: FeedForwardNet, X: np.ndarray, rng: np.random.Generator,
                  layers: Sequence[int] | None = None, mc_samples: int = 1,
                  labels: np.ndarray | None = None) -> KFAC:
    """K-FAC factors ``A = E[a a^T]`` and ``S = E[g g^T]``.

    Pseudo-gradients use labels sampled from the model unless ``labels``
    is given (empirical Fisher). ``mc_samples`` label draws are taken per
    input; the draws are made in input order so that splitting the data
    into chunks and merging reproduces the one-shot estimate.
    """
    _check_data(X, labels)
    if mc_samples < 1:
        raise ValidationError("mc_samples must be at least 1")
    idx = _resolve_layers(net, layers)
    trace = nw.forward(net, X)
    n = len(X)
    acc_S = {l: np.zeros((net.layers[l].d_out,) * 2) for l in idx}
    for _ in range(mc_samples):
        g = nw.sample_pseudo_gradient(net, trace, rng, labels)
        for l in idx:
            acc_S[l] += g[l].T @ g[l]
    out = {}
    for l in idx:
        a = trace.inputs[l]
        A = a.T @ a / n
        S = acc_S[l] / (n * mc_samples)
        out[l] = LayerFactors(0.5 * (A + A.T), 0.5 * (S + S.T), n * mc_samples)
    return KFAC(KfacFactors(out))


def zero_factors(net: FeedForwardNet, layers: Sequence[int] | None = None) -> KfacFactors:
    """Empty accumulator; as a curvature model it imposes no constraint."""
    idx = _resolve_layers(net, layers)
    return KfacFactors({
        l: LayerFactors(np.zeros((net.layers[l].d_in,) * 2), np.zeros((net.layers[l].d_out,) * 2), 0)
        for l in idx
    })


def zero_curvature(net: FeedForwardNet, layers: Sequence[int] | None = None) -> KFAC:
    return KFAC(zero_factors(net, layers))


def ekfac_correct(net: FeedForwardNet, X: np.ndarray, kfac: KFAC | KfacFactors,
                  rng: np.random.Generator, mc_samples: int = 1,
                  labels: np.ndarray | None = None) -> EKFAC:
    """Replace the product eigenvalues by second moments in the Kronecker basis.

    ``lam_star[i, j] = E[(U_out^T g a^T U_in)_{ij}^2]`` over (input, label)
    pairs, with fresh label draws from ``rng``.
    """
    factors = kfac.factors if isinstance(kfac, KFAC) else kfac
    if not factors.layers:
        raise StateError("EK-FAC correction needs K-FAC factors")
    _check_data(X, labels)
    trace = nw.forward(net, X)
    n = len(X)
    bases = {}
    for l, f in factors.layers.items():
        eo, ei = sym_eig(f.S), sym_eig(f.A)
        bases[l] = (eo, ei)
    stars = {l: np.zeros((f.d_out, f.d_in)) for l, f in factors.layers.items()}
    for _ in range(mc_samples):
        g = nw.sample_pseudo_gradient(net, trace, rng, labels)
        for l in factors.layers:
            eo, ei = bases[l]
            # per-example rotated gradient is (U_out^T g)(U_in^T a)^T, rank one
            go = g[l] @ eo.U
            ai = trace.inputs[l] @ ei.U
            stars[l] += (go ** 2).T @ (ai ** 2)
    corr = {}
    for l in factors.layers:
        eo, ei = bases[l]
        corr[l] = EkfacLayer(eo.U, ei.U, stars[l] / (n * mc_samples), eo.lam, ei.lam)
    return EKFAC(factors, corr)


def activation_covariance(net: FeedForwardNet, X: np.ndarray, layers: Sequence[int] | None = None) -> ActivationCov:
    _check_data(X)
    idx = _resolve_layers(net, layers)
    trace = nw.forward(net, X)
    A, d_out = {}, {}
    for l in idx:
        a = trace.inputs[l]
        cov = a.T @ a / len(X)
        A[l] = 0.5 * (cov + cov.T)
        d_out[l] = net.layers[l].d_out
    return ActivationCov(A, d_out)


def aggregate_factors(acc: KfacFactors, incoming: KfacFactors) -> KfacFactors:
    """Sample-count-weighted running average of two factor sets."""
    if set(acc.layers) != set(incoming.layers):
        raise ValidationError(f"layer sets differ: {sorted(acc.layers)} vs {sorted(incoming.layers)}")
    out = {}
    for l, a in acc.layers.items():
        b = incoming.layers[l]
        if a.A.shape != b.A.shape or a.S.shape != b.S.shape:
            raise DimensionError(f"layer {l}: factor shapes differ")
        total = a.count + b.count
        if total == 0:
            out[l] = LayerFactors(a.A.copy(), a.S.copy(), 0)
            continue
        wa, wb = a.count / total, b.count / total
        out[l] = LayerFactors(wa * a.A + wb * b.A, wa * a.S + wb * b.S, total)
    return KfacFactors(out)


# ------------------------------------------------------------------ Bregman


@dataclass
class BregmanReport:
    value: float
    quadratic_estimate: float | None = None
    relative_gap: float | None = None


def bregman_values(logits: np.ndarray, logits0: np.ndarray) -> np.ndarray:
    """Per-example cross-entropy Bregman divergence between two logit sets.

    The label terms cancel, leaving ``KL(softmax(z0) || softmax(z))``
    written as ``lse(z) - lse(z0) - pi0^T (z - z0)``.
    """
    pi0 = nw.softmax(logits0)
    return nw.logsumexp(logits) - nw.logsumexp(logits0) - np.sum(pi0 * (logits - logits0), axis=1)


def bregman_divergence(net: FeedForwardNet, net0: FeedForwardNet, X: np.ndarray,
                       model: CurvatureModel | None = None, floor: float = 1e-300) -> BregmanReport:
    """Mean Bregman divergence of ``net`` from ``net0`` on ``X``.

    With ``model`` given, also reports ``0.5 * delta^T C delta`` over the
    model's layers and the relative gap to the divergence.
    """
    if net.architecture() != net0.architecture():
        raise ValidationError("networks have different architectures")
    _check_data(X)
    value = float(np.mean(bregman_values(nw.forward(net, X).logits, nw.forward(net0, X).logits)))
    if model is None:
        return BregmanReport(value)
    layers = model_layers(model)
    delta = [net.layers[l].W - net0.layers[l].W for l in layers]
    quad = 0.5 * quadratic_form(model, delta)
    gap = abs(value - quad) / max(value, floor)
    return BregmanReport(value, quad, gap)


def quadratic_form(model: CurvatureModel, delta: Sequence[np.ndarray] | dict[int, np.ndarray]) -> float:
    """``delta^T C delta`` for the matrix ``C`` the model stands for.

    ``delta`` holds one matrix per tracked layer (in the model's layer
    order) or a dict keyed by layer index. Kronecker models are contracted
    factorwise as ``tr(D^T S D A)``.
    """
    layers = model_layers(model)
    if isinstance(delta, dict):
        mats = [np.asarray(delta[l]) for l in layers]
    else:
        mats = [np.asarray(d) for d in delta]
    if len(mats) != len(layers):
        raise DimensionError(f"expected {len(layers)} layer deltas, got {len(mats)}")
    if isinstance(model, (ExactHessian, GNH)):
        C = model.H if isinstance(model, ExactHessian) else model.G
        for D, size in zip(mats, model.sizes):
            if D.size != size:
                raise DimensionError("delta shape does not match the curvature model")
        v = nw.flatten(mats)
        return float(v @ C @ v)
    total = 0.0
    for l, D in zip(layers, mats):
        if isinstance(model, KFAC):
            f = model.factors.layers[l]
            _check_shape(D, (f.d_out, f.d_in), l)
            total += float(np.sum(D * (f.S @ D @ f.A)))
        elif isinstance(model, EKFAC):
            c = model.corrections[l]
            _check_shape(D, c.lam_star.shape, l)
            rot = c.U_out.T @ D @ c.U_in
            total += float(np.sum(c.lam_star * rot ** 2))
        elif isinstance(model, ActivationCov):
            A = model.A[l]
            _check_shape(D, (model.d_out[l], A.shape[0]), l)
            total += float(np.sum(D * (D @ A)))
        else:  # pragma: no cover
            raise ValidationError(f"unknown curvature model {type(model).__name__}")
    return total


def _check_shape(D: np.ndarray, shape: tuple[int, int], layer: int) -> None:
    if D.shape != tuple(shape):
        raise DimensionError(f"layer {layer}: delta has shape {D.shape}, expected {tuple(shape)}")


def build_curvature(kind: str, net: FeedForwardNet, X: np.ndarray, y: np.ndarray,
                    rng: np.random.Generator, layers: Sequence[int] | None = None,
                    mc_samples: int = 1, empirical_fisher: bool = False) -> CurvatureModel:
    """Dispatch by name: ``hessian``, ``gnh``, ``kfac``, ``ekfac``, ``actcov`` or ``none``."""
    labels = y if empirical_fisher else None
    if kind == "hessian":
        return exact_hessian(net, X, y, layers)
    if kind == "gnh":
        return exact_gnh(net, X, layers)
    if kind == "kfac":
        return kfac_estimate(net, X, rng, layers, mc_samples, labels)
    if kind == "ekfac":
        k = kfac_estimate(net, X, rng, layers, mc_samples, labels)
        return ekfac_correct(net, X, k, rng, mc_samples, labels)
    if kind == "actcov":
        return activation_covariance(net, X, layers)
    if kind == "none":
        return zero_curvature(net, layers)
    raise ValidationError(f"unknown curvature kind {kind!r}")
