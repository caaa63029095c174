"""Implicit sampling with tempered weights, plus the pCN and LMAP baselines.

Samples are drawn from the Gaussian map ``theta = theta_MAP + L^T xi`` with
``L^T L`` the inverse Hessian at the MAP point.  Importance weights are
``exp((Fhat - F) / scale)`` with ``Fhat`` the quadratic expansion of ``F``; a
scale above one flattens the weights while keeping their order.
"""
from __future__ import annotations

import csv
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla

__all__ = [
    "PosteriorSurrogate",
    "SampleEnsemble",
    "Chain",
    "ThetaSearch",
    "hessian_gaussian",
    "hessian_laplace",
    "factor_inverse",
    "make_surrogate",
    "draw_samples",
    "evaluate",
    "tempered_weights",
    "ess",
    "select_theta",
    "sus_resample",
    "implicit_sampling",
    "lmap_samples",
    "pcn_mcmc",
]

log = logging.getLogger(__name__)

CLIP = 1e-12


def _sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def factor_inverse(hinv: np.ndarray) -> np.ndarray:
    """Upper factor ``L`` with ``L^T L = hinv``.

    Falls back to a clipped eigendecomposition when Cholesky fails on a
    roundoff-indefinite matrix.
    """
    hinv = _sym(np.asarray(hinv, dtype=float))
    try:
        return np.linalg.cholesky(hinv).T
    except np.linalg.LinAlgError:
        w, U = np.linalg.eigh(hinv)
        if w[-1] <= 0:
            raise np.linalg.LinAlgError("inverse Hessian has no positive eigenvalues")
        w = np.maximum(w, CLIP * w[-1])
        log.warning("inverse Hessian clipped to be positive definite")
        return (U * np.sqrt(w)).T


def hessian_gaussian(Hb, C, Gamma) -> tuple[np.ndarray, np.ndarray]:
    """Inverse Hessian ``C - C Hb^T (Hb C Hb^T + Gamma)^-1 Hb C`` and its factor."""
    Hb = np.atleast_2d(np.asarray(Hb, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    Gamma = np.atleast_2d(np.asarray(Gamma, dtype=float))
    CHt = C @ Hb.T
    Sm = _sym(Hb @ CHt + Gamma)
    hinv = _sym(C - CHt @ sla.solve(Sm, CHt.T, assume_a="pos"))
    return hinv, factor_inverse(hinv)


def hessian_laplace(Hb, Gamma, lam: float, w) -> tuple[np.ndarray, np.ndarray]:
    """Hessian ``Hb^T Gamma^-1 Hb + 2 lam W`` and the factor of its inverse.

    ``w`` is the diagonal of ``W`` frozen at the MAP point.
    """
    Hb = np.atleast_2d(np.asarray(Hb, dtype=float))
    Gamma = np.atleast_2d(np.asarray(Gamma, dtype=float))
    w = np.asarray(w, dtype=float)
    if np.any(w <= 0):
        raise ValueError("W must have a positive diagonal")
    hess = _sym(Hb.T @ sla.solve(Gamma, Hb, assume_a="pos") + 2.0 * lam * np.diag(w))
    try:
        c = sla.cho_factor(hess)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("Hessian is singular; the prior is too weak") from exc
    hinv = _sym(sla.cho_solve(c, np.eye(hess.shape[0])))
    if np.linalg.cond(hess) > 1e14:
        raise np.linalg.LinAlgError("Hessian is numerically singular")
    return hess, factor_inverse(hinv)


@dataclass(frozen=True, eq=False)
class PosteriorSurrogate:
    """Quadratic expansion of ``F`` around the MAP point."""

    theta_map: np.ndarray
    phi_F: float
    hess: np.ndarray = field(repr=False)
    L: np.ndarray = field(repr=False)  # L^T L = hess^-1

    @property
    def dim(self) -> int:
        return self.theta_map.size

    @property
    def covariance(self) -> np.ndarray:
        return self.L.T @ self.L

    def fhat(self, theta) -> np.ndarray:
        dx = np.atleast_2d(theta) - self.theta_map
        return self.phi_F + 0.5 * np.einsum("ij,jk,ik->i", dx, self.hess, dx)


def make_surrogate(theta_map, phi_F: float, hinv: np.ndarray | None = None, L=None, hess=None):
    """Build a surrogate from any two of (inverse Hessian, factor, Hessian)."""
    if L is None:
        L = factor_inverse(hinv)
    if hess is None:
        Linv = sla.solve_triangular(L, np.eye(L.shape[0])) if np.allclose(L, np.triu(L)) else np.linalg.inv(L)
        hess = _sym(Linv @ Linv.T)
    return PosteriorSurrogate(np.asarray(theta_map, dtype=float), float(phi_F), hess, L)


def draw_samples(surrogate: PosteriorSurrogate, n: int, seed=None, xi: np.ndarray | None = None) -> np.ndarray:
    """``theta_i = theta_MAP + L^T xi_i`` for standard-normal ``xi_i`` (rows)."""
    if n < 1:
        raise ValueError("need at least one sample")
    if xi is None:
        xi = np.random.default_rng(seed).standard_normal((n, surrogate.dim))
    return surrogate.theta_map + xi @ surrogate.L


def evaluate(F: Callable[[np.ndarray], float], samples: np.ndarray, workers: int = 1) -> np.ndarray:
    """``F`` on every row; failures become ``inf`` (weight zero)."""

    def one(x):
        try:
            return float(F(x))
        except Exception as exc:  # forward failure -> excluded sample
            log.warning("F evaluation failed: %s", exc)
            return np.inf

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            return np.array(list(ex.map(one, samples)))
    return np.array([one(x) for x in samples])


def tempered_weights(fhat, f, scale: float = 1.0) -> np.ndarray:
    """Normalized ``exp((fhat - f) / scale)``, exponent shifted by its max.

    Non-finite ``f`` values receive weight zero and trigger a warning.
    """
    if scale < 1:
        raise ValueError(f"scale must be >= 1, got {scale}")
    x = (np.asarray(fhat, dtype=float) - np.asarray(f, dtype=float)) / scale
    bad = ~np.isfinite(x)
    if bad.all():
        raise ValueError("no finite log-weights")
    if bad.any():
        warnings.warn(f"{bad.sum()} samples with non-finite F get zero weight", RuntimeWarning)
    x = np.where(bad, -np.inf, x)
    w = np.exp(x - x[~bad].max())
    return w / w.sum()


def ess(weights) -> float:
    w = np.asarray(weights, dtype=float)
    return 1.0 / float(w @ w)


@dataclass(frozen=True)
class ThetaSearch:
    theta: float
    ess: float
    reached: bool


def select_theta(fhat, f, target: float, max_iter: int = 100, method: str = "increment") -> ThetaSearch:
    """Smallest scale reaching ``ess >= target``.

    ``increment`` walks 1, 2, 3, ... for at most ``max_iter`` updates;
    ``bisect`` brackets in the same integer range and bisects (ESS grows with
    the scale on the ensembles this is used for).
    """
    if target > np.size(f):
        raise ValueError("target ESS exceeds the ensemble size")
    if method == "increment":
        theta = 1.0
        for _ in range(max_iter):
            e = ess(tempered_weights(fhat, f, theta))
            if e >= target:
                return ThetaSearch(theta, e, True)
            theta += 1.0
        e = ess(tempered_weights(fhat, f, theta))
        if e >= target:
            return ThetaSearch(theta, e, True)
        warnings.warn(f"target ESS {target} not reached; ESS={e:.1f} at scale {theta}", RuntimeWarning)
        return ThetaSearch(theta, e, False)
    if method == "bisect":
        lo, hi = 1, 1 + max_iter
        e_lo = ess(tempered_weights(fhat, f, lo))
        if e_lo >= target:
            return ThetaSearch(1.0, e_lo, True)
        e_hi = ess(tempered_weights(fhat, f, hi))
        if e_hi < target:
            warnings.warn(f"target ESS {target} not reached; ESS={e_hi:.1f} at scale {hi}", RuntimeWarning)
            return ThetaSearch(float(hi), e_hi, False)
        while hi - lo > 1:
            mid = (lo + hi) // 2
            e_mid = ess(tempered_weights(fhat, f, mid))
            if e_mid >= target:
                hi, e_hi = mid, e_mid
            else:
                lo = mid
        return ThetaSearch(float(hi), e_hi, True)
    raise ValueError(f"unknown method {method!r}")


def sus_resample(weights, seed=None) -> np.ndarray:
    """Stochastic universal sampling: indices of the resampled ensemble."""
    w = np.asarray(weights, dtype=float)
    n = w.size
    u = np.random.default_rng(seed).uniform(0.0, 1.0 / n)
    pointers = u + np.arange(n) / n
    cum = np.cumsum(w)
    cum[-1] = max(cum[-1], 1.0)
    return np.searchsorted(cum, pointers, side="right")


@dataclass(eq=False)
class SampleEnsemble:
    samples: np.ndarray
    F: np.ndarray
    Fhat: np.ndarray
    weights: np.ndarray
    scale: float = 1.0
    resampled: np.ndarray | None = None  # indices from SUS

    @property
    def size(self) -> int:
        return self.samples.shape[0]

    @property
    def ess(self) -> float:
        return ess(self.weights)

    @property
    def invalid(self) -> np.ndarray:
        return ~np.isfinite(self.F)

    def posterior_samples(self) -> np.ndarray:
        """Equally weighted samples after resampling (raw samples if none)."""
        return self.samples if self.resampled is None else self.samples[self.resampled]

    def mean(self) -> np.ndarray:
        return self.weights @ self.samples

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "weight", "F", "Fhat"] + [f"v_{j + 1}" for j in range(self.samples.shape[1])])
            for i in range(self.size):
                w.writerow([i, repr(float(self.weights[i])), repr(float(self.F[i])), repr(float(self.Fhat[i]))]
                           + [repr(float(x)) for x in self.samples[i]])


def implicit_sampling(
    surrogate: PosteriorSurrogate,
    F: Callable[[np.ndarray], float],
    n: int,
    seed=None,
    scale: float | None = 1.0,
    target_ess: float | None = None,
    max_scale_iter: int = 100,
    resample: bool = True,
    workers: int = 1,
) -> SampleEnsemble:
    """Draw, weight (fixed ``scale`` or ESS-targeted) and resample.

    When ``target_ess`` is given the scale is chosen by :func:`select_theta`.
    """
    rng = np.random.default_rng(seed)
    xi = rng.standard_normal((n, surrogate.dim))
    theta = draw_samples(surrogate, n, xi=xi)
    f = evaluate(F, theta, workers)
    fh = surrogate.fhat(theta)
    if target_ess is not None:
        scale = select_theta(fh, f, target_ess, max_scale_iter).theta
    w = tempered_weights(fh, f, scale)
    idx = sus_resample(w, rng) if resample else None
    return SampleEnsemble(theta, f, fh, w, float(scale), idx)


def lmap_samples(surrogate: PosteriorSurrogate, n: int, seed=None) -> SampleEnsemble:
    """Gaussian approximation ``N(theta_MAP, hess^-1)``; same draws as implicit sampling."""
    rng = np.random.default_rng(seed)
    xi = rng.standard_normal((n, surrogate.dim))
    theta = draw_samples(surrogate, n, xi=xi)
    fh = surrogate.fhat(theta)
    return SampleEnsemble(theta, np.full(n, np.nan), fh, np.full(n, 1.0 / n))


@dataclass(eq=False)
class Chain:
    samples: np.ndarray
    accepted: np.ndarray
    misfit: np.ndarray = field(repr=False)

    @property
    def acceptance_rate(self) -> float:
        return float(self.accepted[1:].mean()) if self.accepted.size > 1 else 0.0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "accepted"] + [f"v_{j + 1}" for j in range(self.samples.shape[1])])
            for i, (x, a) in enumerate(zip(self.samples, self.accepted)):
                w.writerow([i, int(a)] + [repr(float(t)) for t in x])


def pcn_mcmc(
    misfit: Callable[[np.ndarray], float],
    prior_sample: Callable[[np.random.Generator], np.ndarray],
    beta: float,
    n_steps: int,
    seed=None,
    v0=None,
) -> Chain:
    """Preconditioned Crank-Nicolson chain for a centred Gaussian prior.

    Proposal ``v' = sqrt(1 - beta^2) v + beta xi`` with ``xi`` a prior draw;
    acceptance ``min(1, exp(Phi(v) - Phi(v')))`` with ``Phi`` the data misfit.
    Row 0 of the chain is the starting point.
    """
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must lie in [0, 1), got {beta}")
    rng = np.random.default_rng(seed)
    v = np.asarray(prior_sample(rng) if v0 is None else v0, dtype=float).copy()
    phi = float(misfit(v))
    out = np.empty((n_steps + 1, v.size))
    acc = np.zeros(n_steps + 1, dtype=bool)
    mis = np.empty(n_steps + 1)
    out[0], acc[0], mis[0] = v, True, phi
    root = np.sqrt(1.0 - beta**2)
    for t in range(1, n_steps + 1):
        prop = root * v + beta * np.asarray(prior_sample(rng), dtype=float)
        phi_p = float(misfit(prop))
        if np.log(rng.uniform()) < phi - phi_p:
            v, phi = prop, phi_p
            acc[t] = True
        out[t], mis[t] = v, phi
    return Chain(out, acc, mis)
