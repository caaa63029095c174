"""Lowest-order mixed finite elements on structured rectangular grids.

Velocity unknowns are normal components on edges (one per edge, constant
along the edge), pressure unknowns are cell averages.  Interior edges carry
the global +x / +y orientation; boundary edges are oriented outward so a
boundary DoF *is* the outward normal flux density.

Cell ``c = j*nx + i`` (row-major, ``i`` along x).  Vertical edges come first,
``e = j*(nx+1) + i``; horizontal edges follow, ``e = nV + j*nx + i``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "RectGrid",
    "ForwardSystem",
    "SaddleSolver",
    "SingularSystemError",
    "build_rect_grid",
    "assemble_mixed",
    "assemble_loads",
    "solve_saddle",
    "extract_boundary_flux",
    "side_edges",
    "write_cell_field",
    "read_cell_field",
    "write_edge_field",
]

SIDES = ("left", "right", "bottom", "top")


class SingularSystemError(RuntimeError):
    """Raised when a saddle-point system cannot be factorized or solved."""


@dataclass(frozen=True, eq=False)
class RectGrid:
    nx: int
    ny: int
    domain: tuple[float, float, float, float] = (0.0, 1.0, 0.0, 1.0)
    # derived index maps, filled in __post_init__
    edge_cells: np.ndarray = field(init=False, repr=False)
    edge_normals: np.ndarray = field(init=False, repr=False)
    edge_midpoints: np.ndarray = field(init=False, repr=False)
    edge_lengths: np.ndarray = field(init=False, repr=False)
    is_boundary: np.ndarray = field(init=False, repr=False)
    cell_edges: np.ndarray = field(init=False, repr=False)
    cell_centers: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        nx, ny = self.nx, self.ny
        if int(nx) != nx or int(ny) != ny or nx < 1 or ny < 1:
            raise ValueError(f"cell counts must be positive integers, got ({nx}, {ny})")
        x0, x1, y0, y1 = self.domain
        if not (x1 > x0 and y1 > y0):
            raise ValueError(f"degenerate domain {self.domain}")
        hx, hy = (x1 - x0) / nx, (y1 - y0) / ny
        nv = (nx + 1) * ny
        nh = nx * (ny + 1)

        # vertical edges
        iv, jv = np.meshgrid(np.arange(nx + 1), np.arange(ny), indexing="xy")
        iv, jv = iv.ravel(), jv.ravel()
        # horizontal edges
        ih, jh = np.meshgrid(np.arange(nx), np.arange(ny + 1), indexing="xy")
        ih, jh = ih.ravel(), jh.ravel()

        left = np.where(iv > 0, jv * nx + iv - 1, -1)
        right = np.where(iv < nx, jv * nx + iv, -1)
        below = np.where(jh > 0, (jh - 1) * nx + ih, -1)
        above = np.where(jh < ny, jh * nx + ih, -1)
        edge_cells = np.concatenate([np.stack([left, right], 1), np.stack([below, above], 1)])

        normals = np.zeros((nv + nh, 2))
        normals[:nv, 0] = np.where(iv == 0, -1.0, 1.0)
        normals[nv:, 1] = np.where(jh == 0, -1.0, 1.0)

        mids = np.concatenate(
            [
                np.stack([x0 + iv * hx, y0 + (jv + 0.5) * hy], 1),
                np.stack([x0 + (ih + 0.5) * hx, y0 + jh * hy], 1),
            ]
        )
        lengths = np.concatenate([np.full(nv, hy), np.full(nh, hx)])
        boundary = (edge_cells < 0).any(axis=1)

        ic, jc = np.meshgrid(np.arange(nx), np.arange(ny), indexing="xy")
        ic, jc = ic.ravel(), jc.ravel()
        lft = jc * (nx + 1) + ic
        bot = nv + jc * nx + ic
        cell_edges = np.stack([lft, lft + 1, bot, bot + nx], 1)
        centers = np.stack([x0 + (ic + 0.5) * hx, y0 + (jc + 0.5) * hy], 1)

        for name, val in [
            ("edge_cells", edge_cells),
            ("edge_normals", normals),
            ("edge_midpoints", mids),
            ("edge_lengths", lengths),
            ("is_boundary", boundary),
            ("cell_edges", cell_edges),
            ("cell_centers", centers),
        ]:
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def hx(self) -> float:
        return (self.domain[1] - self.domain[0]) / self.nx

    @property
    def hy(self) -> float:
        return (self.domain[3] - self.domain[2]) / self.ny

    @property
    def cell_area(self) -> float:
        return self.hx * self.hy

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def n_vertical(self) -> int:
        return (self.nx + 1) * self.ny

    @property
    def n_edges(self) -> int:
        return self.nx * (self.ny + 1) + (self.nx + 1) * self.ny

    @property
    def boundary_edges(self) -> np.ndarray:
        return np.flatnonzero(self.is_boundary)


def build_rect_grid(nx: int, ny: int, domain=(0.0, 1.0, 0.0, 1.0)) -> RectGrid:
    return RectGrid(nx, ny, tuple(float(v) for v in domain))


def side_edges(grid: RectGrid, side: str) -> np.ndarray:
    """Boundary edge ids on one side, ordered by increasing coordinate."""
    nx, ny, nv = grid.nx, grid.ny, grid.n_vertical
    if side == "left":
        return np.arange(ny) * (nx + 1)
    if side == "right":
        return np.arange(ny) * (nx + 1) + nx
    if side == "bottom":
        return nv + np.arange(nx)
    if side == "top":
        return nv + ny * nx + np.arange(nx)
    raise ValueError(f"unknown side {side!r}; expected one of {SIDES}")


@dataclass(frozen=True, eq=False)
class ForwardSystem:
    """Assembled mixed-FEM blocks (velocity mass, coupling, pressure/reaction mass).

    ``B`` holds ``-(div v, u)`` so the first block row reads ``A sigma + B beta = G``.
    """

    A: sp.csc_matrix
    B: sp.csc_matrix
    C: sp.csc_matrix
    D: sp.csc_matrix

    @property
    def n_velocity(self) -> int:
        return self.A.shape[0]

    @property
    def n_pressure(self) -> int:
        return self.C.shape[0]

    def block_matrix(self, s: float, mass: float = 1.0) -> sp.csc_matrix:
        """Left-hand operator ``[[A, B], [-s B^T, mass*C + s D]]``."""
        return sp.bmat(
            [[self.A, self.B], [-s * self.B.T, mass * self.C + s * self.D]], format="csc"
        )


def _cell_values(grid: RectGrid, values, name: str) -> np.ndarray:
    arr = np.broadcast_to(np.asarray(values, dtype=float), (grid.n_cells,)).copy()
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def assemble_mixed(grid: RectGrid, k, q=0.0) -> ForwardSystem:
    """Assemble A (k^-1 weighted velocity mass), B, C and D on ``grid``.

    ``k`` and ``q`` are per-cell values (scalars broadcast).
    """
    k = _cell_values(grid, k, "k")
    q = _cell_values(grid, q, "q")
    bad = np.flatnonzero(k <= 0)
    if bad.size:
        raise ValueError(f"diffusion coefficient must be positive; cell {bad[0]} has k={k[bad[0]]}")

    hx, hy, area = grid.hx, grid.hy, grid.cell_area
    ce = grid.cell_edges
    nrm = grid.edge_normals
    # signs mapping DoF -> axis component for [L, R, B, T]
    sgn = np.stack(
        [nrm[ce[:, 0], 0], nrm[ce[:, 1], 0], nrm[ce[:, 2], 1], nrm[ce[:, 3], 1]], axis=1
    )
    w = area / k
    rows, cols, vals = [], [], []
    for a, b in ((0, 1), (2, 3)):
        for p, r in ((a, a), (b, b), (a, b), (b, a)):
            coef = 1.0 / 3.0 if p == r else 1.0 / 6.0
            rows.append(ce[:, p])
            cols.append(ce[:, r])
            vals.append(coef * w * sgn[:, p] * sgn[:, r])
    ne = grid.n_edges
    A = sp.csc_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(ne, ne)
    )

    cells = np.arange(grid.n_cells)
    # integral of div(phi_e) over the cell is the outward flux of phi_e
    flux = np.stack([-sgn[:, 0] * hy, sgn[:, 1] * hy, -sgn[:, 2] * hx, sgn[:, 3] * hx], 1)
    B = sp.csc_matrix(
        (-flux.ravel(), (ce.ravel(), np.repeat(cells, 4))), shape=(ne, grid.n_cells)
    )
    C = sp.diags(np.full(grid.n_cells, area), format="csc")
    D = sp.diags(q * area, format="csc")
    return ForwardSystem(A=A, B=B, C=C, D=D)


def assemble_loads(
    grid: RectGrid,
    f: Callable[[np.ndarray, np.ndarray, float], np.ndarray] | float,
    g: Callable[[np.ndarray, np.ndarray, float], np.ndarray] | float,
    times: Sequence[float],
) -> tuple[np.ndarray, np.ndarray]:
    """Source and boundary load vectors for every time in ``times``.

    Returns ``F`` with shape (n_cells, len(times)) and ``G`` with shape
    (n_edges, len(times)).  ``f`` and ``g`` are callables ``(x, y, t)`` or
    constants; both are sampled by the midpoint rule.
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size == 0 or not np.all(np.isfinite(times)):
        raise ValueError("times must be a non-empty 1-D sequence of finite values")
    xc, yc = grid.cell_centers.T
    bd = grid.boundary_edges
    xb, yb = grid.edge_midpoints[bd].T
    F = np.empty((grid.n_cells, times.size))
    G = np.zeros((grid.n_edges, times.size))
    for n, t in enumerate(times):
        fv = f(xc, yc, t) if callable(f) else f
        gv = g(xb, yb, t) if callable(g) else g
        F[:, n] = np.broadcast_to(fv, xc.shape) * grid.cell_area
        G[bd, n] = -np.broadcast_to(gv, xb.shape) * grid.edge_lengths[bd]
    return F, G


class SaddleSolver:
    """Factorized ``[[A, B], [-s B^T, mass*C + s D]]`` reused across right-hand sides."""

    def __init__(self, system: ForwardSystem, s: float, mass: float = 1.0, rtol: float = 1e-10):
        if not s > 0:
            raise ValueError(f"time coupling s must be positive, got {s}")
        self.system = system
        self.s = float(s)
        self.rtol = rtol
        self.matrix = system.block_matrix(s, mass)
        try:
            self._lu = spla.splu(self.matrix)
        except RuntimeError as exc:
            raise SingularSystemError(f"saddle system is singular: {exc}") from exc

    def solve(self, rhs_u, rhs_p) -> tuple[np.ndarray, np.ndarray]:
        nu = self.system.n_velocity
        rhs = np.concatenate([np.asarray(rhs_u, float), np.asarray(rhs_p, float)], axis=0)
        x = self._lu.solve(rhs)
        if not np.all(np.isfinite(x)):
            raise SingularSystemError("saddle solve produced non-finite values")
        scale = np.linalg.norm(rhs)
        if scale > 0:
            res = np.linalg.norm(self.matrix @ x - rhs) / scale
            if res > self.rtol:
                raise SingularSystemError(f"relative residual {res:.2e} exceeds {self.rtol:.0e}")
        return x[:nu], x[nu:]


def solve_saddle(system: ForwardSystem, s: float, rhs_u, rhs_p, mass: float = 1.0):
    """One-shot solve of the block system; see :class:`SaddleSolver`."""
    return SaddleSolver(system, s, mass).solve(rhs_u, rhs_p)


def extract_boundary_flux(grid: RectGrid, sigma: np.ndarray, probes) -> np.ndarray:
    """Read normal-flux DoFs at ``probes = [(edge_id, step), ...]``.

    ``sigma`` is a trajectory of shape (n_steps + 1, n_edges) indexed by step,
    or a single velocity vector, in which case every step must be 0 or 1.
    """
    probes = np.asarray(probes, dtype=int).reshape(-1, 2)
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim == 1:
        sigma = np.stack([sigma, sigma])
    edges, steps = probes[:, 0], probes[:, 1]
    if np.any((edges < 0) | (edges >= grid.n_edges)):
        raise IndexError("probe edge id out of range")
    interior = edges[~grid.is_boundary[edges]]
    if interior.size:
        raise ValueError(f"probe on interior edge {interior[0]}; only boundary edges are observable")
    if np.any((steps < 0) | (steps >= sigma.shape[0])):
        raise IndexError(f"probe time index out of range [0, {sigma.shape[0] - 1}]")
    return sigma[steps, edges]


def write_cell_field(path, grid: RectGrid, values) -> None:
    values = _cell_values(grid, values, "field")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "value"])
        for (x, y), v in zip(grid.cell_centers, values):
            w.writerow([repr(float(x)), repr(float(y)), repr(float(v))])


def read_cell_field(path, grid: RectGrid | None = None) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if grid is not None:
        if data.shape[0] != grid.n_cells:
            raise ValueError(f"{path}: expected {grid.n_cells} rows, found {data.shape[0]}")
        if not np.allclose(data[:, :2], grid.cell_centers, atol=1e-9):
            raise ValueError(f"{path}: cell centres do not match the grid")
    return data[:, 2].copy()


def write_edge_field(path, grid: RectGrid, values) -> None:
    values = np.asarray(values, dtype=float)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["edge", "x", "y", "nx", "ny", "value"])
        for e in range(grid.n_edges):
            x, y = grid.edge_midpoints[e]
            nx_, ny_ = grid.edge_normals[e]
            w.writerow([e, repr(float(x)), repr(float(y)), nx_, ny_, repr(float(values[e]))])
