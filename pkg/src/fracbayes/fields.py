"""Parametrization of unknown inputs and the negative log posterior."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla

from .mesh import RectGrid

__all__ = [
    "CovarianceSpec",
    "KLBasis",
    "PriorSpec",
    "covariance_matrix",
    "kl_decompose",
    "field_from_coeffs",
    "coeffs_from_field",
    "bounded_transform",
    "inverse_bounded_transform",
    "misfit",
    "penalty",
    "neg_log_posterior",
]


@dataclass(frozen=True)
class CovarianceSpec:
    """Separable squared-exponential covariance ``rho^2 exp(-dx^2/2l1^2 - dy^2/2l2^2)``."""

    rho: float
    l1: float
    l2: float

    def __post_init__(self):
        if not (self.rho > 0 and self.l1 > 0 and self.l2 > 0):
            raise ValueError(f"covariance parameters must be positive: {self}")


def _axis_kernel(x: np.ndarray, ell: float) -> np.ndarray:
    d = x[:, None] - x[None, :]
    return np.exp(-0.5 * (d / ell) ** 2)


def covariance_matrix(cov: CovarianceSpec, points: np.ndarray) -> np.ndarray:
    """Dense covariance between ``points`` (shape (m, 2))."""
    dx = points[:, None, 0] - points[None, :, 0]
    dy = points[:, None, 1] - points[None, :, 1]
    return cov.rho**2 * np.exp(-0.5 * (dx / cov.l1) ** 2 - 0.5 * (dy / cov.l2) ** 2)


@dataclass(frozen=True, eq=False)
class KLBasis:
    """Truncated KL basis: ``log field = phi @ v + mean``, ``phi[:, j] = sqrt(lam_j) zeta_j``."""

    phi: np.ndarray = field(repr=False)
    eigenvalues: np.ndarray
    mean: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return self.phi.shape[1]

    @property
    def modes(self) -> np.ndarray:
        """Unit-norm eigenvectors ``zeta_j``."""
        return self.phi / np.sqrt(self.eigenvalues)

    def save(self, path) -> None:
        np.savez(path, phi=self.phi, eigenvalues=self.eigenvalues, mean=self.mean)

    @classmethod
    def load(cls, path) -> "KLBasis":
        z = np.load(path)
        return cls(z["phi"], z["eigenvalues"], z["mean"])


def kl_decompose(cov: CovarianceSpec, grid: RectGrid, l: int, mean=0.0) -> KLBasis:
    """Leading ``l`` eigenpairs of the covariance sampled at cell centres.

    The kernel is separable, so the cell-centre covariance is the Kronecker
    product of the two axis matrices and its eigenpairs are products of 1-D
    eigenpairs.
    """
    m = grid.n_cells
    if int(l) != l or l < 1 or l > m:
        raise ValueError(f"truncation must be in [1, {m}], got {l}")
    l = int(l)
    xs = grid.cell_centers[: grid.nx, 0]
    ys = grid.cell_centers[:: grid.nx, 1]
    lx, ux = np.linalg.eigh(_axis_kernel(xs, cov.l1))
    ly, uy = np.linalg.eigh(_axis_kernel(ys, cov.l2))
    lx, ly = np.clip(lx, 0.0, None), np.clip(ly, 0.0, None)
    prod = cov.rho**2 * np.outer(ly, lx)  # [b, a] -> eigenvalue of kron(uy_b, ux_a)
    order = np.argsort(prod.ravel(), kind="stable")[::-1][:l]
    lam = prod.ravel()[order]
    tol = lam[0] * m * np.finfo(float).eps
    if lam[-1] <= tol:
        raise ValueError(f"truncation {l} exceeds the numerical rank of the covariance")
    b, a = np.divmod(order, lx.size)
    # cell index c = j*nx + i -> zeta[c] = uy[j, b] * ux[i, a]
    zeta = (uy[:, b][:, None, :] * ux[:, a][None, :, :]).reshape(m, l)
    # fix the sign so the largest-magnitude entry of each mode is positive
    piv = zeta[np.abs(zeta).argmax(axis=0), np.arange(l)]
    zeta = zeta * np.sign(piv)
    mean = np.broadcast_to(np.asarray(mean, dtype=float), (m,)).copy()
    return KLBasis(zeta * np.sqrt(lam), lam, mean)


def field_from_coeffs(basis: KLBasis, v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != basis.size:
        raise ValueError(f"expected {basis.size} coefficients, got {v.shape[-1]}")
    return np.exp(v @ basis.phi.T + basis.mean)


def coeffs_from_field(basis: KLBasis, values) -> np.ndarray:
    """Least-squares KL coefficients of a positive field."""
    r = np.log(np.asarray(values, dtype=float)) - basis.mean
    return (basis.phi.T @ r) / basis.eigenvalues


def bounded_transform(x):
    """Map the real line onto (0, 1): ``1/2 + arctan(x)/pi``."""
    return 0.5 + np.arctan(x) / np.pi


def inverse_bounded_transform(y):
    y = np.asarray(y, dtype=float)
    if np.any((y <= 0) | (y >= 1)):
        raise ValueError("inverse transform needs arguments strictly inside (0, 1)")
    out = np.tan(np.pi * (y - 0.5))
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class PriorSpec:
    """Prior family and hyperparameters.

    For ``family="gaussian"`` the prior on the coefficients is
    ``N(0, lam^-1 I)`` with ``lam ~ Gamma(a, b)`` during the MAP stage and
    ``lam`` fixed afterwards.  For ``family="laplace"`` the density is
    ``(lam/2) exp(-lam |v|_1)``.
    """

    family: str = "gaussian"
    sigma: float = 0.01
    lam: float = 1.0
    a: float = 1.0
    b: float = 1e-4

    def __post_init__(self):
        if self.family not in ("gaussian", "laplace"):
            raise ValueError(f"unknown prior family {self.family!r}")
        if not (self.sigma > 0 and self.lam > 0 and self.a > 0 and self.b >= 0):
            raise ValueError(f"invalid prior hyperparameters: {self}")


def misfit(hv, d, sigma: float) -> float:
    r = np.asarray(hv, dtype=float) - np.asarray(d, dtype=float)
    return float(r @ r) / (2.0 * sigma**2)


def penalty(v, prior: PriorSpec) -> float:
    v = np.asarray(v, dtype=float)
    if prior.family == "gaussian":
        return 0.5 * prior.lam * float(v @ v)
    return prior.lam * float(np.abs(v).sum())


def neg_log_posterior(v, d, prior: PriorSpec, forward: Callable[[np.ndarray], np.ndarray]) -> float:
    """``|H(v) - d|^2 / 2 sigma^2`` plus the prior penalty (constants dropped)."""
    return misfit(forward(np.asarray(v, dtype=float)), d, prior.sigma) + penalty(v, prior)
