"""Posterior and sampler diagnostics."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

__all__ = [
    "IntervalBand",
    "KLResult",
    "Moments",
    "acf",
    "iact_ess",
    "gaussian_kl",
    "moments",
    "weight_histogram",
    "intervals",
    "BUCKET_EDGES",
    "write_table",
]

log = logging.getLogger(__name__)

BUCKET_EDGES = np.array([0.0, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0])
BUCKET_LABELS = ["[0,1e-6)", "[1e-6,1e-5)", "[1e-5,1e-4)", "[1e-4,1e-3)", "[1e-3,1e-2)", "[1e-2,1e-1)", "[1e-1,1]"]


def _as_chain(series) -> np.ndarray:
    x = np.asarray(series, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def acf(series, max_lag: int) -> np.ndarray:
    """Autocorrelation ``rho_0..rho_max_lag`` of a (vector) series.

    Vector states use ``E[(M_t - mu)^T (M_{t+k} - mu)] / E|M_t - mu|^2``.
    """
    x = _as_chain(series)
    n = x.shape[0]
    if not 0 <= max_lag < n:
        raise ValueError(f"series of length {n} is too short for lag {max_lag}")
    x = x - x.mean(axis=0)
    var = float(np.sum(x * x)) / n
    if var <= 0:
        raise ValueError("series has zero variance")
    out = np.empty(max_lag + 1)
    for k in range(max_lag + 1):
        out[k] = float(np.sum(x[: n - k] * x[k:])) / n / var
    out[0] = 1.0
    return out


def _geyer_tau(rho: np.ndarray) -> float:
    # initial positive sequence: sum pairs rho_{2m} + rho_{2m+1} while positive
    tau = -1.0
    for m in range(len(rho) // 2):
        pair = rho[2 * m] + rho[2 * m + 1]
        if pair <= 0:
            break
        tau += 2.0 * pair
    return max(tau, 1.0 / len(rho))


def iact_ess(chain, max_lag: int | None = None) -> tuple[float, float]:
    """Averaged integrated autocorrelation time over coordinates and ``N / iact``."""
    x = _as_chain(chain)
    n = x.shape[0]
    if max_lag is None:
        max_lag = min(n - 1, 1000)
    taus = [_geyer_tau(acf(x[:, j], max_lag)) for j in range(x.shape[1])]
    tau = float(np.mean(taus))
    return tau, n / tau


def _fit(samples, weights=None):
    x = _as_chain(samples)
    if weights is None:
        mu = x.mean(axis=0)
        cov = np.atleast_2d(np.cov(x, rowvar=False))
    else:
        w = np.asarray(weights, dtype=float)
        w = w / w.sum()
        mu = w @ x
        r = x - mu
        cov = (r * w[:, None]).T @ r / (1.0 - w @ w)
    return mu, cov


@dataclass(frozen=True)
class KLResult:
    value: float
    regularized: bool

    def __float__(self) -> float:
        return self.value


def _regularize(cov: np.ndarray) -> tuple[np.ndarray, bool]:
    w = np.linalg.eigvalsh(cov)
    top = max(w[-1], np.finfo(float).tiny)
    if w[0] > 1e-12 * top:
        return cov, False
    log.warning("fitted covariance is singular; adding a ridge")
    return cov + 1e-10 * top * np.eye(cov.shape[0]), True


def gaussian_kl(samples_a, samples_b, weights_a=None, weights_b=None) -> KLResult:
    """``KL(N_a || N_b)`` between moment-matched Gaussian fits of two sample sets."""
    a, b = _as_chain(samples_a), _as_chain(samples_b)
    dim = a.shape[1]
    if b.shape[1] != dim:
        raise ValueError("sample sets have different dimensions")
    if min(a.shape[0], b.shape[0]) < dim + 2:
        raise ValueError(f"need at least {dim + 2} samples per set")
    mu_a, ca = _fit(a, weights_a)
    mu_b, cb = _fit(b, weights_b)
    ca, ra = _regularize(ca)
    cb, rb = _regularize(cb)
    la = np.linalg.cholesky(ca)
    lb = np.linalg.cholesky(cb)
    M = np.linalg.solve(lb, la)
    dm = np.linalg.solve(lb, mu_b - mu_a)
    logdet = 2.0 * (np.log(np.diag(lb)).sum() - np.log(np.diag(la)).sum())
    kl = 0.5 * (float(np.sum(M * M)) + float(dm @ dm) - dim + logdet)
    return KLResult(max(kl, 0.0), ra or rb)


@dataclass(frozen=True, eq=False)
class Moments:
    mean: np.ndarray
    std: np.ndarray
    skewness: np.ndarray
    kurtosis: np.ndarray  # excess


def moments(samples, weights=None) -> Moments:
    """Per-coordinate mean, std, skewness and excess kurtosis (population moments)."""
    x = _as_chain(samples)
    if x.shape[0] < 4:
        raise ValueError("need at least 4 samples")
    w = np.full(x.shape[0], 1.0 / x.shape[0]) if weights is None else np.asarray(weights, float) / np.sum(weights)
    mu = w @ x
    r = x - mu
    m2 = w @ r**2
    if np.any(np.ptp(x, axis=0) == 0) or np.any(m2 <= 0):
        raise ValueError("degenerate (zero) variance")
    m3 = w @ r**3
    m4 = w @ r**4
    return Moments(mu, np.sqrt(m2), m3 / m2**1.5, m4 / m2**2 - 3.0)


def weight_histogram(weights) -> np.ndarray:
    """Counts in the seven decade buckets ``[0,1e-6), ..., [1e-2,1e-1), [1e-1,1]``."""
    w = np.asarray(weights, dtype=float)
    idx = np.searchsorted(BUCKET_EDGES[1:-1], w, side="right")
    return np.bincount(idx, minlength=7)


@dataclass(frozen=True, eq=False)
class IntervalBand:
    credible_lower: np.ndarray
    credible_upper: np.ndarray
    prediction_lower: np.ndarray
    prediction_upper: np.ndarray
    level: float = 0.95


def intervals(realizations, sigma: float, level: float = 0.95, seed=None) -> IntervalBand:
    """Credible and prediction bands from model outputs (rows = realizations).

    The prediction band adds one ``N(0, sigma^2)`` draw per realization; it is
    widened where needed so that it contains the credible band.
    """
    y = np.atleast_2d(np.asarray(realizations, dtype=float))
    if y.shape[0] < 100:
        raise ValueError("need at least 100 realizations")
    q = [50 * (1 - level), 50 * (1 + level)]
    cl, cu = np.percentile(y, q, axis=0)
    noisy = y + sigma * np.random.default_rng(seed).standard_normal(y.shape)
    pl, pu = np.percentile(noisy, q, axis=0)
    return IntervalBand(cl, cu, np.minimum(pl, cl), np.maximum(pu, cu), level)


def write_table(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])
