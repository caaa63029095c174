"""L1 discretization of two-term Caputo derivatives and the history-carrying march."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gamma as gamma_fn

from .mesh import ForwardSystem, SaddleSolver

__all__ = [
    "MultiTermOrders",
    "MultiTermScheme",
    "Trajectory",
    "l1_weights",
    "multiterm_scheme",
    "march",
]


def _check_order(alpha: float, name: str = "alpha") -> float:
    alpha = float(alpha)
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"{name} must lie in (0, 1), got {alpha}")
    return alpha


@dataclass(frozen=True)
class MultiTermOrders:
    alpha1: float
    alpha2: float
    gamma1: float = 1.0
    gamma2: float = 1.0

    def __post_init__(self):
        _check_order(self.alpha1, "alpha1")
        _check_order(self.alpha2, "alpha2")
        if self.gamma1 < 0 or self.gamma2 < 0 or self.gamma1 + self.gamma2 <= 0:
            raise ValueError(
                f"multipliers must be nonnegative and not both zero, got ({self.gamma1}, {self.gamma2})"
            )


def l1_weights(alpha: float, n: int) -> np.ndarray:
    """Weights ``(n+1-k)^(1-a) - (n-k)^(1-a)`` for ``k = 1..n``."""
    alpha = _check_order(alpha)
    if int(n) != n or n < 1:
        raise ValueError(f"step index must be a positive integer, got {n}")
    k = np.arange(1, int(n) + 1, dtype=float)
    e = 1.0 - alpha
    return (n + 1 - k) ** e - (n - k) ** e


@dataclass(frozen=True, eq=False)
class MultiTermScheme:
    """Precomputed coefficients of the two-term L1 march.

    ``b[n-1]`` multiplies the initial state at step ``n`` and ``c[k-1]`` the
    state ``k`` steps back.  ``theta`` holds the per-order mixing fractions
    ``s*gamma_i/s_i``; they sum to one.
    """

    orders: MultiTermOrders
    dt: float
    steps: int
    s1: float
    s2: float
    s: float
    theta: tuple[float, float]
    b: np.ndarray = field(repr=False)
    c: np.ndarray = field(repr=False)

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.steps + 1)


def multiterm_scheme(orders: MultiTermOrders, dt: float, steps: int) -> MultiTermScheme:
    if not dt > 0:
        raise ValueError(f"time step must be positive, got {dt}")
    if int(steps) != steps or steps < 1:
        raise ValueError(f"step count must be a positive integer, got {steps}")
    steps = int(steps)
    a1, a2, g1, g2 = orders.alpha1, orders.alpha2, orders.gamma1, orders.gamma2
    s1 = dt**a1 * gamma_fn(2.0 - a1)
    s2 = dt**a2 * gamma_fn(2.0 - a2)
    den = g1 * s2 + g2 * s1
    s = s1 * s2 / den
    theta = (g1 * s2 / den, g2 * s1 / den)

    n = np.arange(1, steps + 1, dtype=float)
    k = np.arange(1, steps, dtype=float)
    b = np.zeros(steps)
    c = np.zeros(steps - 1)
    for a, th in ((a1, theta[0]), (a2, theta[1])):
        e = 1.0 - a
        b += th * (n**e - (n - 1) ** e)
        c += th * (2 * k**e - (k + 1) ** e - (k - 1) ** e)
    b.setflags(write=False)
    c.setflags(write=False)
    return MultiTermScheme(orders, float(dt), steps, s1, s2, s, theta, b, c)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Time history; row ``n`` is time ``t_n``.  ``sigma[0]`` is a zero placeholder."""

    times: np.ndarray
    sigma: np.ndarray
    beta: np.ndarray


def march(
    system: ForwardSystem,
    scheme: MultiTermScheme,
    F: np.ndarray,
    G: np.ndarray,
    beta0: np.ndarray | None = None,
    solver: SaddleSolver | None = None,
) -> Trajectory:
    """Advance the mixed system through ``scheme.steps`` L1 steps.

    ``F`` and ``G`` hold one column per step ``n = 1..M`` (shape (·, M)); pass
    ``solver`` to reuse a factorization built with ``s = scheme.s``.
    """
    M = scheme.steps
    F = np.asarray(F, dtype=float)
    G = np.asarray(G, dtype=float)
    if F.ndim != 2 or G.ndim != 2 or F.shape[1] != M or G.shape[1] != M:
        raise ValueError(
            f"loads must have {M} columns (one per step), got F{F.shape} and G{G.shape}"
        )
    if F.shape[0] != system.n_pressure or G.shape[0] != system.n_velocity:
        raise ValueError("load rows do not match the system dimensions")
    if solver is None:
        solver = SaddleSolver(system, scheme.s)
    elif not np.isclose(solver.s, scheme.s, rtol=1e-14, atol=0.0):
        raise ValueError("solver was factorized for a different s")

    nb = system.n_pressure
    beta = np.zeros((M + 1, nb))
    if beta0 is not None:
        beta[0] = beta0
    sigma = np.zeros((M + 1, system.n_velocity))
    C = system.C
    s, b, c = scheme.s, scheme.b, scheme.c
    Cbeta0 = C @ beta[0]
    for n in range(1, M + 1):
        # history: c_1 beta^{n-1} + ... + c_{n-1} beta^1
        hist = c[: n - 1] @ beta[n - 1 : 0 : -1] if n > 1 else np.zeros(nb)
        rhs_p = s * F[:, n - 1] + C @ hist + b[n - 1] * Cbeta0
        sigma[n], beta[n] = solver.solve(G[:, n - 1], rhs_p)
    return Trajectory(scheme.times, sigma, beta)
