"""Parameter-to-observation maps built from the fine or the reduced solver."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .caputo import MultiTermOrders, march, multiterm_scheme
from .fields import KLBasis, bounded_transform, field_from_coeffs
from .gmsfem import OfflineBasis, build_coarse_grid, build_offline_basis, project_coarse, project_loads, prolongate
from .mesh import RectGrid, SaddleSolver, assemble_loads, assemble_mixed, side_edges

__all__ = [
    "Affine",
    "ForwardModel",
    "boundary_probes",
    "gaussian_field",
]


@dataclass(frozen=True)
class Affine:
    """``const + x*X + y*Y`` (time independent)."""

    const: float = 0.0
    x: float = 0.0
    y: float = 0.0

    def __call__(self, X, Y, t=0.0):
        return self.const + self.x * np.asarray(X) + self.y * np.asarray(Y)

    @classmethod
    def parse(cls, spec) -> "Affine":
        if isinstance(spec, (int, float)):
            return cls(float(spec))
        return cls(**{k: float(v) for k, v in dict(spec).items()})


def boundary_probes(grid: RectGrid, sides: Sequence[str], times: Sequence[float], dt: float) -> np.ndarray:
    """All edges on ``sides`` at each time, as (edge, step) rows; step = round(t/dt)."""
    edges = np.concatenate([side_edges(grid, s) for s in sides])
    rows = []
    for t in times:
        n = int(round(t / dt))
        if not np.isclose(n * dt, t, rtol=0, atol=1e-9 * max(1.0, abs(t))):
            raise ValueError(f"observation time {t} is not on the time grid (dt={dt})")
        rows.append(np.column_stack([edges, np.full(edges.size, n)]))
    return np.concatenate(rows)


def gaussian_field(grid: RectGrid, rho: float, l1: float, l2: float, seed, mean=0.0) -> np.ndarray:
    """Full-rank draw of a squared-exponential Gaussian field at cell centres."""
    xs = grid.cell_centers[: grid.nx, 0]
    ys = grid.cell_centers[:: grid.nx, 1]

    def root(x, ell):
        w, U = np.linalg.eigh(np.exp(-0.5 * ((x[:, None] - x[None, :]) / ell) ** 2))
        return U * np.sqrt(np.clip(w, 0.0, None))

    rx, ry = root(xs, l1), root(ys, l2)
    xi = np.random.default_rng(seed).standard_normal((grid.ny, grid.nx))
    return mean + rho * (ry @ xi @ rx.T).ravel()


class ForwardModel:
    """Maps a parameter vector to boundary-flux observations.

    Parameter layout: transformed orders (when ``alpha`` is None), then the
    KL coefficients of ``log k`` (when ``k`` is a :class:`KLBasis`), then those
    of ``log q``.  ``solver`` is ``"fine"`` or ``"gmsfem"``; the reduced solver
    needs ``basis``.  Blocks that do not depend on the parameters are
    assembled once.
    """

    def __init__(
        self,
        fine: RectGrid,
        dt: float,
        steps: int,
        gammas: tuple[float, float],
        f,
        g,
        probes,
        k,
        q,
        alpha: tuple[float, float] | None = None,
        solver: str = "fine",
        basis: OfflineBasis | None = None,
    ):
        if solver not in ("fine", "gmsfem"):
            raise ValueError(f"unknown solver {solver!r}")
        if solver == "gmsfem" and basis is None:
            raise ValueError("the reduced solver needs an offline basis")
        self.fine, self.dt, self.steps = fine, float(dt), int(steps)
        self.gammas = tuple(float(x) for x in gammas)
        self.alpha, self.k, self.q = alpha, k, q
        self.solver, self.basis = solver, basis
        self.probes = np.asarray(probes, dtype=int).reshape(-1, 2)
        if np.any(~fine.is_boundary[self.probes[:, 0]]):
            raise ValueError("probes must sit on boundary edges")
        if np.any((self.probes[:, 1] < 1) | (self.probes[:, 1] > self.steps)):
            raise ValueError(f"probe steps must lie in [1, {self.steps}]")
        times = self.dt * np.arange(1, self.steps + 1)
        self.F, self.G = assemble_loads(fine, f, g, times)
        if solver == "gmsfem":
            self.Fc, self.Gc = project_loads(basis, self.F, self.G)
            self._probe_rows = basis.R_off[self.probes[:, 0], :].tocsr()
        self.n_alpha = 0 if alpha is not None else 2
        self.n_k = k.size if isinstance(k, KLBasis) else 0
        self.n_q = q.size if isinstance(q, KLBasis) else 0
        self._fixed = None
        if not (self.n_k or self.n_q):
            self._fixed = self._system(self._field(k, None), self._field(q, None))

    @property
    def n_params(self) -> int:
        return self.n_alpha + self.n_k + self.n_q

    @property
    def n_obs(self) -> int:
        return self.probes.shape[0]

    @staticmethod
    def _field(spec, coeffs):
        return field_from_coeffs(spec, coeffs) if isinstance(spec, KLBasis) else spec

    def split(self, v) -> tuple[MultiTermOrders, np.ndarray, np.ndarray]:
        v = np.asarray(v, dtype=float)
        if v.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got shape {v.shape}")
        a, b = self.n_alpha, self.n_alpha + self.n_k
        if self.n_alpha:
            a1, a2 = bounded_transform(v[:2])
        else:
            a1, a2 = self.alpha
        orders = MultiTermOrders(float(a1), float(a2), *self.gammas)
        k = self._field(self.k, v[a:b] if self.n_k else None)
        q = self._field(self.q, v[b:] if self.n_q else None)
        return orders, k, q

    def _system(self, k, q):
        sys_f = assemble_mixed(self.fine, k, q)
        return project_coarse(self.basis, sys_f) if self.solver == "gmsfem" else sys_f

    def _march(self, v):
        orders, k, q = self.split(v)
        system = self._fixed if self._fixed is not None else self._system(k, q)
        scheme = multiterm_scheme(orders, self.dt, self.steps)
        F, G = (self.Fc, self.Gc) if self.solver == "gmsfem" else (self.F, self.G)
        return march(system, scheme, F, G, solver=SaddleSolver(system, scheme.s))

    def __call__(self, v) -> np.ndarray:
        traj = self._march(v)
        e, n = self.probes[:, 0], self.probes[:, 1]
        if self.solver == "gmsfem":
            # row i of the probe matrix picks the fine edge of probe i
            return np.asarray(self._probe_rows.multiply(traj.sigma[n]).sum(axis=1)).ravel()
        return traj.sigma[n, e]

    def trajectory(self, v):
        """Fine-scale (sigma, beta) histories, prolongated for the reduced solver."""
        traj = self._march(v)
        if self.solver == "gmsfem":
            return prolongate(self.basis, traj.sigma, traj.beta)
        return traj.sigma, traj.beta


def reduced_basis(fine: RectGrid, coarse: tuple[int, int], k_train, L_b: int, merge: str = "union") -> OfflineBasis:
    return build_offline_basis(build_coarse_grid(fine, *coarse), k_train, L_b, merge)
