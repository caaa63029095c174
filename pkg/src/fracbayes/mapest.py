"""MAP point estimation: difference sensitivities, augmented Tikhonov and IRLS."""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla

from .fields import PriorSpec

__all__ = [
    "ForwardError",
    "SensitivityMatrix",
    "MapResult",
    "sensitivity",
    "augmented_tikhonov",
    "irls",
    "irls_weights",
]

log = logging.getLogger(__name__)

Forward = Callable[[np.ndarray], np.ndarray]


class ForwardError(RuntimeError):
    """A forward evaluation failed while probing a point."""


@dataclass(frozen=True, eq=False)
class SensitivityMatrix:
    matrix: np.ndarray
    point: np.ndarray
    step: float
    value: np.ndarray = field(repr=False)  # H(point)

    @property
    def shape(self):
        return self.matrix.shape


def _call(forward: Forward, v: np.ndarray, what: str) -> np.ndarray:
    try:
        out = np.asarray(forward(v), dtype=float)
    except Exception as exc:
        raise ForwardError(f"forward solve failed at {what}: {exc}") from exc
    if not np.all(np.isfinite(out)):
        raise ForwardError(f"forward solve returned non-finite values at {what}")
    return out


def sensitivity(
    forward: Forward,
    v,
    step: float = 0.5,
    central: bool = False,
    base: np.ndarray | None = None,
    workers: int = 1,
) -> SensitivityMatrix:
    """Finite-difference Jacobian of ``forward`` at ``v``.

    One-sided differences by default; ``base`` may carry an already computed
    ``forward(v)``.  Columns are evaluated on ``workers`` threads.
    """
    v = np.asarray(v, dtype=float)
    if not step > 0:
        raise ValueError("difference step must be positive")
    h0 = _call(forward, v, "base point") if base is None else np.asarray(base, dtype=float)

    def column(j: int) -> np.ndarray:
        e = np.zeros_like(v)
        e[j] = step
        hp = _call(forward, v + e, f"column {j} (+step)")
        if central:
            hm = _call(forward, v - e, f"column {j} (-step)")
            return (hp - hm) / (2 * step)
        return (hp - h0) / step

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            cols = list(ex.map(column, range(v.size)))
    else:
        cols = [column(j) for j in range(v.size)]
    return SensitivityMatrix(np.column_stack(cols), v.copy(), float(step), h0)


@dataclass(eq=False)
class MapResult:
    """MAP point and the per-iteration trace (row 0 is the initial guess)."""

    v: np.ndarray
    lam: float
    misfit: list[float] = field(default_factory=list)
    lam_trace: list[float] = field(default_factory=list)
    step_norm: list[float] = field(default_factory=list)
    converged: bool = False

    @property
    def iterations(self) -> int:
        return len(self.misfit) - 1

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "misfit", "lambda", "step_norm"])
            for i, row in enumerate(zip(self.misfit, self.lam_trace, self.step_norm)):
                w.writerow([i, *(repr(float(x)) for x in row)])


def _solve_normal(Hb: np.ndarray, reg: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    N = Hb.T @ Hb + reg
    try:
        c = sla.cho_factor(N)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            "normal equations are singular; increase the regularization or check the sensitivity"
        ) from exc
    return sla.cho_solve(c, rhs)


def augmented_tikhonov(
    forward: Forward,
    d,
    prior: PriorSpec,
    v0,
    mu0: float,
    max_iter: int = 20,
    eps: float = 1e-3,
    step: float = 0.5,
    central: bool = False,
    workers: int = 1,
) -> MapResult:
    """Hierarchical-Gaussian MAP by alternating damped Gauss-Newton and Gamma updates.

    Each iteration recomputes the sensitivity at the current point, takes
    ``h = (Hb^T Hb + mu I)^-1 Hb^T (d - H(v))``, and updates
    ``lam = (l/2 + a - 1) / (|v|^2/2 + b)``, ``mu = lam sigma^2``.
    """
    d = np.asarray(d, dtype=float)
    v = np.array(v0, dtype=float)
    l = v.size
    sigma2 = prior.sigma**2
    mu = float(mu0)
    hv = _call(forward, v, "initial guess")
    res = MapResult(v, mu / sigma2, [float((hv - d) @ (hv - d))], [mu / sigma2], [0.0])
    shape = 0.5 * l + prior.a - 1.0
    if shape <= 0:
        log.warning("l/2 + a - 1 = %g is not positive; lambda will collapse", shape)
    for k in range(1, max_iter + 1):
        S = sensitivity(forward, v, step, central=central, base=hv, workers=workers).matrix
        h = _solve_normal(S, mu * np.eye(l), S.T @ (d - hv))
        v = v + h
        lam = shape / (0.5 * float(v @ v) + prior.b)
        mu = lam * sigma2
        hv = _call(forward, v, f"iteration {k}")
        r = hv - d
        res.misfit.append(float(r @ r))
        res.lam_trace.append(lam)
        hn = float(np.linalg.norm(h))
        res.step_norm.append(hn)
        log.info("atik %d: misfit=%.4e lambda=%.4e |h|=%.3e", k, r @ r, lam, hn)
        if hn < eps:
            res.converged = True
            break
    res.v, res.lam = v, res.lam_trace[-1]
    return res


def irls_weights(v, eps: float) -> np.ndarray:
    """Diagonal of ``W``: ``(v_i^2 + eps)^(-1/2)``."""
    v = np.asarray(v, dtype=float)
    return 1.0 / np.sqrt(v * v + eps)


def irls(
    forward: Forward,
    d,
    mu: float,
    eps: float = 1e-6,
    v0=None,
    max_iter: int = 10,
    step: float = 0.5,
    sigma: float | None = None,
    tol: float = 0.0,
    central: bool = False,
    workers: int = 1,
) -> MapResult:
    """Iteratively reweighted least squares for ``|H(v)-d|^2 + mu |v|_1``.

    ``v_k = (Hb^T Hb + mu W)^-1 Hb^T (d - H(v_{k-1}) + Hb v_{k-1})`` with ``W``
    rebuilt from ``v_{k-1}``.  When ``sigma`` is given the reported ``lam`` is
    the Laplace rate ``mu / (2 sigma^2)``.
    """
    if not (mu > 0 and eps > 0):
        raise ValueError("mu and eps must be positive")
    if v0 is None:
        raise ValueError("irls needs an initial guess v0")
    d = np.asarray(d, dtype=float)
    v = np.array(v0, dtype=float)
    lam = mu / (2 * sigma**2) if sigma else float("nan")
    hv = _call(forward, v, "initial guess")
    res = MapResult(v, lam, [float((hv - d) @ (hv - d))], [lam], [0.0])
    for k in range(1, max_iter + 1):
        S = sensitivity(forward, v, step, central=central, base=hv, workers=workers).matrix
        w = irls_weights(v, eps)
        v_new = _solve_normal(S, mu * np.diag(w), S.T @ (d - hv + S @ v))
        hn = float(np.linalg.norm(v_new - v))
        v = v_new
        hv = _call(forward, v, f"iteration {k}")
        r = hv - d
        res.misfit.append(float(r @ r))
        res.lam_trace.append(lam)
        res.step_norm.append(hn)
        log.info("irls %d: misfit=%.4e |dv|=%.3e", k, r @ r, hn)
        if hn <= tol:
            res.converged = True
            break
    res.v = v
    return res
