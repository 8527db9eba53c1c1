"""Dense symmetric linear algebra used to build low-curvature projectors.

Everything here works in float64. Eigenvalues are always reported in
descending order, and the energy rule is shared by the dense and the
Kronecker-factored code paths so both select the same subspace.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NumericalError, ValidationError

ASYMMETRY_TOL = 1e-8
CLAMP_REL = 1e-10


@dataclass(frozen=True)
class SymEig:
    """Eigendecomposition ``M = U diag(lam) U^T`` with ``lam`` non-increasing."""

    U: np.ndarray
    lam: np.ndarray

    @property
    def dim(self) -> int:
        return self.lam.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.lam) @ self.U.T


@dataclass(frozen=True)
class KronSpectrum:
    """Eigenvalues of the two factors of ``A (x) S``.

    The product grid ``lam_out[i] * lam_in[j]`` is only formed on demand,
    as a ``d_out x d_in`` array, never as a Kronecker matrix.
    """

    lam_out: np.ndarray
    lam_in: np.ndarray

    def grid(self) -> np.ndarray:
        return np.multiply.outer(self.lam_out, self.lam_in)


def _fix_signs(U: np.ndarray) -> np.ndarray:
    # Make the largest-magnitude entry of each column positive so that
    # repeated decompositions of the same matrix agree bit-for-bit.
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs


def sym_eig(M: np.ndarray) -> SymEig:
    """Symmetric eigendecomposition with descending eigenvalues.

    Negative eigenvalues whose magnitude is below ``1e-10 * max|lam|`` are
    treated as round-off and clamped to zero. Larger negative eigenvalues
    (indefinite input, e.g. a Hessian away from a minimum) are kept.

    Raises:
        DimensionError: ``M`` is not a non-empty square matrix.
        ValidationError: ``M`` is not symmetric to relative ``1e-8``.
        NumericalError: the eigensolver failed to converge.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1] or M.shape[0] < 1:
        raise DimensionError(f"sym_eig needs a non-empty square matrix, got shape {M.shape}")
    scale = np.linalg.norm(M)
    asym = np.linalg.norm(M - M.T)
    if asym > ASYMMETRY_TOL * max(scale, np.finfo(float).tiny):
        raise ValidationError(f"matrix is not symmetric: relative asymmetry {asym / scale:.3e}")
    sym = 0.5 * (M + M.T)
    try:
        lam, U = np.linalg.eigh(sym)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigendecomposition of {M.shape[0]}x{M.shape[0]} matrix failed: {exc}") from exc
    lam = lam[::-1].copy()
    U = _fix_signs(U[:, ::-1])
    top = np.max(np.abs(lam))
    small_neg = (lam < 0) & (lam > -CLAMP_REL * top)
    lam[small_neg] = 0.0
    return SymEig(U=np.ascontiguousarray(U), lam=lam)


def _check_descending(lam: np.ndarray) -> None:
    if lam.size > 1 and np.any(np.diff(lam) > 0):
        raise ValidationError("eigenvalues must be sorted in descending order")


def _check_gamma(gamma: float) -> None:
    if not (0.0 < gamma < 1.0):
        raise ValidationError(f"gamma must lie in (0, 1), got {gamma!r}")


def energy_cutoff_index(lam: np.ndarray, gamma: float) -> int:
    """Smallest ``r`` whose top-``r`` eigenvalues hold a ``gamma`` energy fraction.

    Eigenvalues tied with the last retained one are retained as well. A
    zero spectrum returns 0, i.e. nothing is treated as high curvature.
    """
    lam = np.asarray(lam, dtype=np.float64).ravel()
    _check_gamma(gamma)
    _check_descending(lam)
    if np.any(lam < 0):
        raise ValidationError("energy_cutoff_index expects nonnegative eigenvalues")
    total = lam.sum()
    if total <= 0.0:
        return 0
    frac = np.cumsum(lam) / total
    k = int(np.argmax(frac >= gamma)) + 1
    if frac[-1] < gamma:
        # only reachable through cumulative round-off when gamma ~ 1
        k = lam.size
    while k < lam.size and lam[k] == lam[k - 1]:
        k += 1
    return k


def dense_projector(eig: SymEig, k: int) -> np.ndarray:
    """Orthogonal projector onto the span of eigenvectors ``k+1 .. p``."""
    p = eig.dim
    if not (0 <= k <= p):
        raise ValidationError(f"cutoff index {k} outside [0, {p}]")
    tail = eig.U[:, k:]
    return tail @ tail.T


def kron_energy_cutoff(spec: KronSpectrum, gamma: float) -> tuple[float, np.ndarray]:
    """Apply the energy rule to the product spectrum of a Kronecker block.

    Returns ``(lam_gamma, mask)`` where ``lam_gamma`` is the largest product
    outside the retained set (``-inf`` if everything is retained) and
    ``mask[i, j] = 1`` iff ``lam_out[i] * lam_in[j] <= lam_gamma``.
    """
    _check_gamma(gamma)
    for name, v in (("lam_out", spec.lam_out), ("lam_in", spec.lam_in)):
        v = np.asarray(v)
        if v.size and np.any(v < -CLAMP_REL * max(np.max(np.abs(v)), np.finfo(float).tiny)):
            raise ValidationError(f"{name} has negative eigenvalues beyond clamping tolerance")
    grid = np.clip(spec.grid(), 0.0, None)
    return grid_energy_cutoff(grid, gamma)


def grid_energy_cutoff(grid: np.ndarray, gamma: float) -> tuple[float, np.ndarray]:
    """Energy rule over an arbitrary nonnegative grid of eigenvalues."""
    flat = np.sort(grid.ravel())[::-1]
    k = energy_cutoff_index(flat, gamma)
    if k >= flat.size:
        return float("-inf"), np.zeros(grid.shape)
    lam_gamma = float(flat[k])
    return lam_gamma, (grid <= lam_gamma).astype(np.float64)
