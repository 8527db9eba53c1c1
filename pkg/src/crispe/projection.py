"""Projectors onto the gamma-approximate nullspace of a curvature model.

Dense models (exact Hessian, GNH) give explicit ``P = U_tail U_tail^T``
per layer block, or one joint block across all tracked layers. Kronecker
models keep the factor eigenbases and a binary mask and apply

    Q -> U_out ((U_out^T Q U_in) * M) U_in^T

without ever forming the ``d_in d_out``-square projector.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import linalg
from .curvature import GNH, KFAC, EKFAC, ActivationCov, CurvatureModel, ExactHessian, kind_of
from .errors import DimensionError, StateError, ValidationError
from .network import flatten, unflatten


@dataclass
class DenseBlock:
    """Projector over the concatenated ``vec`` of one or more layers."""

    layers: tuple[int, ...]
    shapes: tuple[tuple[int, int], ...]
    P: np.ndarray
    eigvals: np.ndarray  # curvature spectrum in the order used for the cutoff
    k: int
    lam_gamma: float
    retained_fraction: float


@dataclass
class FactoredBlock:
    layer: int
    U_out: np.ndarray
    U_in: np.ndarray
    lam_out: np.ndarray
    lam_in: np.ndarray
    M: np.ndarray
    lam_gamma: float
    spectrum: np.ndarray  # d_out x d_in grid the mask was cut from
    retained_fraction: float
    removed_rank: int

    @property
    def layers(self) -> tuple[int, ...]:
        return (self.layer,)


@dataclass
class ProjectorCache:
    gamma: float
    blocks: list[DenseBlock | FactoredBlock]
    kind: str
    built_at: float = field(default_factory=time.time)

    @property
    def layers(self) -> tuple[int, ...]:
        return tuple(sorted(l for b in self.blocks for l in b.layers))

    def block_for(self, layer: int) -> DenseBlock | FactoredBlock:
        for b in self.blocks:
            if layer in b.layers:
                return b
        raise StateError(f"no projector for layer {layer}")

    def retained_energy(self) -> dict[int, float]:
        out = {}
        for b in self.blocks:
            for l in b.layers:
                out[l] = b.retained_fraction
        return out


def _retained(values: np.ndarray, kept: np.ndarray) -> float:
    total = values.sum()
    return float(values[kept].sum() / total) if total > 0 else 0.0


def _dense_block(C: np.ndarray, layers: tuple[int, ...], shapes: tuple[tuple[int, int], ...],
                 gamma: float, magnitude: bool) -> DenseBlock:
    eig = linalg.sym_eig(C)
    U, lam = eig.U, eig.lam
    if magnitude:
        # Hessians away from a minimum are indefinite; rank directions by |curvature|
        order = np.argsort(-np.abs(lam), kind="stable")
        U, lam = U[:, order], np.abs(lam[order])
    else:
        lam = np.clip(lam, 0.0, None)
    k = linalg.energy_cutoff_index(lam, gamma)
    P = linalg.dense_projector(linalg.SymEig(U, lam), k)
    lam_gamma = float(lam[k]) if k < lam.size else float("-inf")
    kept = np.zeros(lam.size, dtype=bool)
    kept[:k] = True
    return DenseBlock(layers, shapes, 0.5 * (P + P.T), lam, k, lam_gamma, _retained(lam, kept))


def _factored_block(layer: int, U_out, U_in, lam_out, lam_in, grid: np.ndarray, gamma: float) -> FactoredBlock:
    grid = np.clip(grid, 0.0, None)
    lam_gamma, M = linalg.grid_energy_cutoff(grid, gamma)
    kept = M == 0
    return FactoredBlock(layer, U_out, U_in, lam_out, lam_in, M, lam_gamma, grid,
                         _retained(grid, kept), int(kept.sum()))


def build_projector(model: CurvatureModel, gamma: float, joint: bool = False) -> ProjectorCache:
    """Per-layer projectors for ``model`` at energy threshold ``gamma``.

    Dense models are split into per-layer diagonal blocks unless ``joint``
    is set, in which case one projector covers all tracked layers.
    """
    if not (0.0 < gamma < 1.0):
        raise ValidationError(f"gamma must lie in (0, 1), got {gamma!r}")
    blocks: list[DenseBlock | FactoredBlock] = []
    if isinstance(model, (ExactHessian, GNH)):
        C = model.H if isinstance(model, ExactHessian) else model.G
        magnitude = isinstance(model, ExactHessian)
        shapes = list(model.shapes)
        if joint:
            blocks.append(_dense_block(C, model.layers, tuple(shapes), gamma, magnitude))
        else:
            pos = 0
            for l, size, shape in zip(model.layers, model.sizes, shapes):
                sub = C[pos:pos + size, pos:pos + size]
                blocks.append(_dense_block(sub, (l,), (shape,), gamma, magnitude))
                pos += size
    elif isinstance(model, KFAC):
        for l, f in sorted(model.factors.layers.items()):
            eo, ei = linalg.sym_eig(f.S), linalg.sym_eig(f.A)
            lo, li = np.clip(eo.lam, 0, None), np.clip(ei.lam, 0, None)
            blocks.append(_factored_block(l, eo.U, ei.U, lo, li, np.multiply.outer(lo, li), gamma))
    elif isinstance(model, EKFAC):
        for l, c in sorted(model.corrections.items()):
            blocks.append(_factored_block(l, c.U_out, c.U_in, c.lam_out, c.lam_in, c.lam_star, gamma))
    elif isinstance(model, ActivationCov):
        for l, A in sorted(model.A.items()):
            ei = linalg.sym_eig(A)
            li = np.clip(ei.lam, 0, None)
            d_out = model.d_out[l]
            k = linalg.energy_cutoff_index(li, gamma)
            M = np.zeros((d_out, li.size))
            M[:, k:] = 1.0
            lam_gamma = float(li[k]) if k < li.size else float("-inf")
            grid = np.broadcast_to(li, (d_out, li.size)).copy()
            kept = M == 0
            blocks.append(FactoredBlock(l, np.eye(d_out), ei.U, np.ones(d_out), li, M, lam_gamma, grid,
                                        _retained(grid, kept), int(kept.sum())))
    else:
        raise ValidationError(f"unsupported curvature model {type(model).__name__}")
    return ProjectorCache(gamma, blocks, kind_of(model))


# ------------------------------------------------------------------ apply


def kron_project(U_out: np.ndarray, U_in: np.ndarray, M: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Rotate, mask, rotate back."""
    return U_out @ ((U_out.T @ Q @ U_in) * M) @ U_in.T


def project_kron(cache: ProjectorCache, layer: int, Q: np.ndarray) -> np.ndarray:
    block = cache.block_for(layer)
    if not isinstance(block, FactoredBlock):
        raise StateError(f"layer {layer} has a dense projector, not a factored one")
    if Q.shape != block.M.shape:
        raise DimensionError(f"gradient shape {Q.shape} does not match layer {layer} {block.M.shape}")
    return kron_project(block.U_out, block.U_in, block.M, Q)


def project_dense(cache: ProjectorCache, layer: int, Q: np.ndarray) -> np.ndarray:
    block = cache.block_for(layer)
    if not isinstance(block, DenseBlock):
        raise StateError(f"layer {layer} has a factored projector, not a dense one")
    if len(block.layers) != 1:
        raise StateError(f"layer {layer} belongs to a joint block; use project_all")
    if Q.shape != block.shapes[0]:
        raise DimensionError(f"gradient shape {Q.shape} does not match layer {layer} {block.shapes[0]}")
    v = block.P @ Q.ravel(order="F")
    return v.reshape(Q.shape, order="F")


def project_all(cache: ProjectorCache, grads: dict[int, np.ndarray]) -> dict[int, np.ndarray]:
    """Project every tracked layer's gradient; joint blocks act on the concatenation."""
    out: dict[int, np.ndarray] = {}
    for b in cache.blocks:
        if isinstance(b, FactoredBlock):
            out[b.layer] = project_kron(cache, b.layer, grads[b.layer])
        else:
            mats = [grads[l] for l in b.layers]
            for l, Q, shape in zip(b.layers, mats, b.shapes):
                if Q.shape != shape:
                    raise DimensionError(f"gradient shape {Q.shape} does not match layer {l} {shape}")
            v = b.P @ flatten(mats)
            for l, Q in zip(b.layers, unflatten(v, b.shapes)):
                out[l] = Q
    return out


def residual_energy(cache: ProjectorCache, layer: int) -> tuple[float, int]:
    """(energy fraction held by the removed directions, number of removed directions)."""
    b = cache.block_for(layer)
    if isinstance(b, DenseBlock):
        return b.retained_fraction, b.k
    return b.retained_fraction, b.removed_rank


def lam_gamma(cache: ProjectorCache, layer: int) -> float:
    return cache.block_for(layer).lam_gamma


def layer_shape(cache: ProjectorCache, layer: int) -> tuple[int, int]:
    b = cache.block_for(layer)
    if isinstance(b, FactoredBlock):
        return b.M.shape
    return b.shapes[b.layers.index(layer)]


def dense_matrix(cache: ProjectorCache) -> np.ndarray:
    """Materialize the projector over all tracked layers by probing basis vectors."""
    idx = cache.layers
    shapes = [layer_shape(cache, l) for l in idx]
    p = sum(r * c for r, c in shapes)
    P = np.empty((p, p))
    e = np.zeros(p)
    for j in range(p):
        e[j] = 1.0
        out = project_all(cache, dict(zip(idx, unflatten(e, shapes))))
        P[:, j] = flatten([out[l] for l in idx])
        e[j] = 0.0
    return P
