"""Mixed generalized multiscale reduction on a structured coarse partition.

Offline stage: for every coarse edge ``E_i`` and every fine edge ``e_j`` on it,
solve a local mixed problem on the coarse neighbourhood ``omega_i`` with unit
normal flux on ``e_j``, zero flux on the rest of ``E_i`` and on the neighbourhood
boundary, and a divergence that is constant in each coarse cell.  The snapshots
of one edge are then compressed by the local spectral problem
``A_snap z = lambda S_snap z`` keeping the ``L_b`` smallest eigenpairs.

Online stage: Galerkin projection of the fine blocks with ``R_off`` (velocity)
and the coarse-cell indicator ``G_off`` (pressure).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import ForwardSystem, RectGrid, assemble_mixed

__all__ = [
    "CoarseGrid",
    "SnapshotSpace",
    "OfflineBasis",
    "build_coarse_grid",
    "build_snapshots",
    "spectral_reduce",
    "build_offline_basis",
    "project_coarse",
    "project_loads",
    "prolongate",
    "restrict_velocity",
    "save_basis",
    "load_basis",
]

log = logging.getLogger(__name__)

DEFLATE_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class CoarseGrid:
    """Coarse partition conforming to ``fine`` with integer refinement ratios."""

    fine: RectGrid
    coarse: RectGrid
    rx: int
    ry: int
    edge_fine: tuple = field(repr=False)  # coarse edge -> fine edge ids (ordered)
    cell_fine: tuple = field(repr=False)  # coarse cell -> fine cell ids (local row-major)

    @property
    def n_edges(self) -> int:
        return self.coarse.n_edges

    @property
    def n_cells(self) -> int:
        return self.coarse.n_cells

    def neighborhood(self, i: int) -> list[int]:
        """Coarse cells ``K_1 [, K_2]`` sharing coarse edge ``i``."""
        return [int(c) for c in self.coarse.edge_cells[i] if c >= 0]


def build_coarse_grid(fine: RectGrid, Nx: int, Ny: int) -> CoarseGrid:
    if Nx < 1 or Ny < 1 or fine.nx % Nx or fine.ny % Ny:
        raise ValueError(
            f"coarse grid {Nx}x{Ny} does not conform to fine grid {fine.nx}x{fine.ny}"
        )
    rx, ry = fine.nx // Nx, fine.ny // Ny
    coarse = RectGrid(Nx, Ny, fine.domain)
    nx, nvf = fine.nx, fine.n_vertical
    edge_fine = []
    for E in range(coarse.n_edges):
        if E < coarse.n_vertical:
            J, I = divmod(E, Nx + 1)
            j = np.arange(J * ry, (J + 1) * ry)
            edge_fine.append(j * (nx + 1) + I * rx)
        else:
            J, I = divmod(E - coarse.n_vertical, Nx)
            i = np.arange(I * rx, (I + 1) * rx)
            edge_fine.append(nvf + (J * ry) * nx + i)
    cell_fine = []
    for K in range(coarse.n_cells):
        J, I = divmod(K, Nx)
        jj, ii = np.meshgrid(np.arange(J * ry, (J + 1) * ry), np.arange(I * rx, (I + 1) * rx), indexing="ij")
        cell_fine.append((jj * nx + ii).ravel())
    return CoarseGrid(fine, coarse, rx, ry, tuple(edge_fine), tuple(cell_fine))


@dataclass(frozen=True, eq=False)
class SnapshotSpace:
    """Snapshot velocities per coarse edge as sparse (n_fine_edges x J) blocks."""

    grid: CoarseGrid
    columns: tuple = field(repr=False)

    @property
    def counts(self) -> list[int]:
        return [c.shape[1] for c in self.columns]

    def matrix(self) -> sp.csc_matrix:
        """Global ``R_snap``."""
        return sp.hstack(self.columns, format="csc")


class _LocalCell:
    """Factorized pure-Neumann mixed problem on one coarse cell."""

    def __init__(self, cg: CoarseGrid, K: int, k_cells: np.ndarray):
        fine, coarse = cg.fine, cg.coarse
        J, I = divmod(K, coarse.nx)
        x0, _, y0, _ = fine.domain
        dom = (x0 + I * cg.rx * fine.hx, x0 + (I + 1) * cg.rx * fine.hx,
               y0 + J * cg.ry * fine.hy, y0 + (J + 1) * cg.ry * fine.hy)
        loc = RectGrid(cg.rx, cg.ry, dom)
        self.loc = loc
        self.cells = cg.cell_fine[K]
        # local edge -> global fine edge, and orientation sign
        nx, nvf, rx, ry = fine.nx, fine.n_vertical, cg.rx, cg.ry
        ge = np.empty(loc.n_edges, dtype=int)
        nvl = loc.n_vertical
        jl, il = np.divmod(np.arange(nvl), rx + 1)
        ge[:nvl] = (J * ry + jl) * (nx + 1) + I * rx + il
        jl, il = np.divmod(np.arange(loc.n_edges - nvl), rx)
        ge[nvl:] = nvf + (J * ry + jl) * nx + I * rx + il
        self.global_edges = ge
        self.sign = np.einsum("ij,ij->i", loc.edge_normals, fine.edge_normals[ge])

        sysl = assemble_mixed(loc, k_cells[self.cells], 0.0)
        bd = loc.is_boundary
        self.bd = np.flatnonzero(bd)
        self.inner = np.flatnonzero(~bd)
        A, B = sysl.A.tocsr(), sysl.B.tocsr()
        self.A_ib = A[self.inner][:, self.bd]
        self.B_b = B[self.bd]
        B_i = B[self.inner]
        # pin the pressure of local cell 0 and drop its (redundant) divergence row
        Bp = B_i[:, 1:]
        mat = sp.bmat([[A[self.inner][:, self.inner], Bp], [-Bp.T, None]], format="csc")
        self.lu = spla.splu(mat)
        self.area = loc.cell_area
        self.K_area = loc.n_cells * loc.cell_area

    def solve(self, vb: np.ndarray) -> np.ndarray:
        """Velocity (local orientation, all local edges) for boundary DoFs ``vb``.

        ``vb`` has shape (n_boundary_edges, m) in local outward orientation.
        """
        lens = self.loc.edge_lengths[self.bd]
        alpha = (lens @ vb) / self.K_area  # constant divergence per snapshot
        rhs_u = -(self.A_ib @ vb)
        rhs_p = (alpha[None, :] * self.area + self.B_b.T @ vb)[1:]
        sol = self.lu.solve(np.vstack([rhs_u, rhs_p]))
        out = np.zeros((self.loc.n_edges, vb.shape[1]))
        out[self.inner] = sol[: self.inner.size]
        out[self.bd] = vb
        return out


def build_snapshots(cg: CoarseGrid, k) -> SnapshotSpace:
    """Snapshot space for one diffusion field ``k`` (per fine cell)."""
    fine = cg.fine
    k = np.broadcast_to(np.asarray(k, dtype=float), (fine.n_cells,))
    if np.any(k <= 0):
        raise ValueError("diffusion coefficient must be positive")
    coarse = cg.coarse
    ce = coarse.cell_edges  # [L, R, B, T] coarse edge ids per coarse cell
    parts: list[list[tuple[np.ndarray, np.ndarray]]] = [[] for _ in range(coarse.n_edges)]
    for K in range(coarse.n_cells):
        cell = _LocalCell(cg, K, k)
        gpos = {int(e): p for p, e in enumerate(cell.global_edges[cell.bd])}
        for E in ce[K]:
            fe = cg.edge_fine[E]
            vb = np.zeros((cell.bd.size, fe.size))
            for j, e in enumerate(fe):
                p = gpos[int(e)]
                # unit flux in the global orientation of e_j, expressed locally
                vb[p, j] = cell.sign[cell.bd[p]]
            vel = cell.solve(vb) * cell.sign[:, None]
            parts[E].append((cell.global_edges, vel))
    cols = []
    for E, plist in enumerate(parts):
        J = cg.edge_fine[E].size
        dense = {}
        for ge, vel in plist:
            for r, e in enumerate(ge):
                dense[int(e)] = vel[r]
        rows = np.fromiter(dense.keys(), dtype=int)
        vals = np.array(list(dense.values()))
        mat = sp.csc_matrix(
            (vals.ravel(), (np.repeat(rows, J), np.tile(np.arange(J), rows.size))),
            shape=(fine.n_edges, J),
        )
        mat.eliminate_zeros()
        cols.append(mat)
    return SnapshotSpace(cg, tuple(cols))


def merge_snapshots(spaces: Sequence[SnapshotSpace]) -> SnapshotSpace:
    """Union of snapshot spaces computed for several training fields."""
    cg = spaces[0].grid
    cols = tuple(sp.hstack([s.columns[E] for s in spaces], format="csc") for E in range(cg.n_edges))
    return SnapshotSpace(cg, cols)


@dataclass(frozen=True, eq=False)
class OfflineBasis:
    """Velocity prolongation ``R_off`` and pressure restriction ``G_off``.

    Columns of ``R_off`` are grouped by coarse edge: column ``i*L_b + k`` is the
    ``k``-th mode of coarse edge ``i``.
    """

    grid: CoarseGrid
    L_b: int
    R_off: sp.csc_matrix = field(repr=False)
    G_off: sp.csr_matrix = field(repr=False)
    eigenvalues: np.ndarray = field(repr=False)  # (n_coarse_edges, L_b)
    regularized: tuple = ()

    @property
    def M_t(self) -> int:
        return self.R_off.shape[1]

    @property
    def column_edge(self) -> np.ndarray:
        return np.repeat(np.arange(self.grid.n_edges), self.L_b)


def _edge_form(fine: RectGrid, k: np.ndarray, fe: np.ndarray) -> np.ndarray:
    """Diagonal of ``a_i``: |e| times the mean of k^-1 over the cells touching e."""
    cells = fine.edge_cells[fe]
    kinv = np.where(cells >= 0, 1.0 / k[np.maximum(cells, 0)], 0.0)
    cnt = (cells >= 0).sum(axis=1)
    return fine.edge_lengths[fe] * kinv.sum(axis=1) / cnt


def _pressure_restriction(cg: CoarseGrid) -> sp.csr_matrix:
    fine = cg.fine
    rows = np.concatenate([np.full(c.size, K) for K, c in enumerate(cg.cell_fine)])
    cols = np.concatenate(cg.cell_fine)
    return sp.csr_matrix((np.ones(cols.size), (rows, cols)), shape=(cg.n_cells, fine.n_cells))


def spectral_reduce(snapshots: SnapshotSpace, k, L_b: int) -> OfflineBasis:
    """Keep the ``L_b`` lowest modes of the local spectral problem on each edge.

    The problem is solved in S-orthonormal coordinates of the snapshot span.
    Directions of the snapshot Gram matrix below ``DEFLATE_TOL`` times its
    largest eigenvalue (dependent snapshots) are dropped; affected edges are
    listed in ``OfflineBasis.regularized``.  Modes with a (numerically) zero edge form,
    which carry no flux across ``E_i``, only arise for merged snapshot spaces
    and are skipped.
    """
    cg = snapshots.grid
    fine = cg.fine
    k = np.broadcast_to(np.asarray(k, dtype=float), (fine.n_cells,))
    L_b = int(L_b)
    jmin = min(snapshots.counts)
    if not 1 <= L_b <= jmin:
        raise ValueError(f"L_b must lie in [1, {jmin}], got {L_b}")
    fsys = assemble_mixed(fine, k, 0.0)
    inv_area = sp.diags(np.full(fine.n_cells, 1.0 / fine.cell_area))
    S_f = (fsys.A + fsys.B @ inv_area @ fsys.B.T).tocsc()

    blocks, eigs, regs = [], [], []
    for E, R in enumerate(snapshots.columns):
        fe = cg.edge_fine[E]
        a_diag = _edge_form(fine, k, fe)
        tr = R[fe].toarray()  # traces on E_i
        A_snap = tr.T @ (a_diag[:, None] * tr)
        S_snap = (R.T @ (S_f @ R)).toarray()
        A_snap = 0.5 * (A_snap + A_snap.T)
        S_snap = 0.5 * (S_snap + S_snap.T)
        # S-orthonormal coordinates of the snapshot span; directions with
        # negligible S-norm (linearly dependent snapshots) are deflated
        w, U = np.linalg.eigh(S_snap)
        span = w > DEFLATE_TOL * w[-1]
        if not span.all():
            regs.append(E)
        Q = U[:, span] / np.sqrt(w[span])
        lam, Y = np.linalg.eigh(Q.T @ A_snap @ Q)
        Z = Q @ Y
        keep = lam > 1e-10 * lam.max()
        if (~keep).any() and keep.sum() < L_b:
            raise ValueError(f"edge {E}: only {keep.sum()} flux-carrying modes, L_b={L_b}")
        lam, Z = lam[keep][:L_b], Z[:, keep][:, :L_b]
        blocks.append(sp.csc_matrix(R @ Z))
        eigs.append(lam)
    if regs:
        log.warning("deflated dependent snapshots on %d edges", len(regs))
    R_off = sp.hstack(blocks, format="csc")
    R_off.eliminate_zeros()
    return OfflineBasis(cg, L_b, R_off, _pressure_restriction(cg), np.array(eigs), tuple(regs))


def build_offline_basis(cg: CoarseGrid, k_train, L_b: int, merge: str = "union") -> OfflineBasis:
    """Offline basis from one or several training fields.

    ``merge="union"`` pools all snapshots per edge and reduces once with the
    forms evaluated on the geometric mean field; ``merge="concat"`` reduces each
    training field separately and concatenates (``L_b`` modes per field).
    """
    ks = np.atleast_2d(np.asarray(k_train, dtype=float))
    if ks.shape[1] != cg.fine.n_cells:
        ks = np.broadcast_to(ks, (ks.shape[0], cg.fine.n_cells))
    if ks.shape[0] == 1:
        return spectral_reduce(build_snapshots(cg, ks[0]), ks[0], L_b)
    if merge == "union":
        kbar = np.exp(np.log(ks).mean(axis=0))
        snaps = merge_snapshots([build_snapshots(cg, kk) for kk in ks])
        return spectral_reduce(snaps, kbar, L_b)
    if merge == "concat":
        parts = [spectral_reduce(build_snapshots(cg, kk), kk, L_b) for kk in ks]
        n = len(parts)
        cols, eigs = [], []
        for E in range(cg.n_edges):
            sl = slice(E * L_b, (E + 1) * L_b)
            cols.extend(p.R_off[:, sl] for p in parts)
            eigs.append(np.concatenate([p.eigenvalues[E] for p in parts]))
        R_off = sp.hstack(cols, format="csc")
        return OfflineBasis(cg, n * L_b, R_off, parts[0].G_off, np.array(eigs),
                            tuple(sorted({e for p in parts for e in p.regularized})))
    raise ValueError(f"unknown merge strategy {merge!r}")


def project_coarse(basis: OfflineBasis, fine: ForwardSystem) -> ForwardSystem:
    """Galerkin projection of the fine blocks onto the offline space."""
    R, Gp = basis.R_off, basis.G_off
    if fine.n_velocity != R.shape[0] or fine.n_pressure != Gp.shape[1]:
        raise ValueError(
            f"fine system ({fine.n_velocity}, {fine.n_pressure}) does not match basis "
            f"({R.shape[0]}, {Gp.shape[1]})"
        )
    RT = R.T.tocsr()
    return ForwardSystem(
        A=(RT @ fine.A @ R).tocsc(),
        B=(RT @ fine.B @ Gp.T).tocsc(),
        C=(Gp @ fine.C @ Gp.T).tocsc(),
        D=(Gp @ fine.D @ Gp.T).tocsc(),
    )


def project_loads(basis: OfflineBasis, F: np.ndarray, G: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Coarse loads ``(G_off F, R_off^T G)``."""
    return basis.G_off @ F, basis.R_off.T @ G


def prolongate(basis: OfflineBasis, sigma_c: np.ndarray, beta_c: np.ndarray):
    """Fine-scale DoFs from coarse ones; accepts single vectors or (steps, dofs) rows."""
    sigma_c = np.asarray(sigma_c, dtype=float)
    beta_c = np.asarray(beta_c, dtype=float)
    if sigma_c.shape[-1] != basis.M_t or beta_c.shape[-1] != basis.grid.n_cells:
        raise ValueError("coarse solution dimensions do not match the basis")
    sig = (basis.R_off @ sigma_c.T).T
    bet = (basis.G_off.T @ beta_c.T).T
    return sig, bet


def restrict_velocity(basis: OfflineBasis, sigma_f: np.ndarray, k) -> np.ndarray:
    """S-orthogonal projection of a fine velocity onto the offline space (coarse coefficients)."""
    fine = basis.grid.fine
    fsys = assemble_mixed(fine, k, 0.0)
    inv_area = sp.diags(np.full(fine.n_cells, 1.0 / fine.cell_area))
    S_f = fsys.A + fsys.B @ inv_area @ fsys.B.T
    R = basis.R_off
    gram = (R.T @ S_f @ R).toarray()
    return np.linalg.solve(gram, R.T @ (S_f @ sigma_f))


def save_basis(path, basis: OfflineBasis) -> None:
    """Persist to ``.npz``; columns stay keyed by coarse edge via ``column_edge``."""
    cg = basis.grid
    R = basis.R_off.tocoo()
    np.savez_compressed(
        path,
        fine=np.array([cg.fine.nx, cg.fine.ny]),
        coarse=np.array([cg.coarse.nx, cg.coarse.ny]),
        domain=np.array(cg.fine.domain),
        L_b=basis.L_b,
        row=R.row, col=R.col, data=R.data, shape=np.array(R.shape),
        column_edge=basis.column_edge,
        eigenvalues=basis.eigenvalues,
        regularized=np.array(basis.regularized, dtype=int),
    )


def load_basis(path) -> OfflineBasis:
    z = np.load(path)
    fine = RectGrid(int(z["fine"][0]), int(z["fine"][1]), tuple(float(v) for v in z["domain"]))
    cg = build_coarse_grid(fine, int(z["coarse"][0]), int(z["coarse"][1]))
    R = sp.csc_matrix((z["data"], (z["row"], z["col"])), shape=tuple(z["shape"]))
    return OfflineBasis(cg, int(z["L_b"]), R, _pressure_restriction(cg), z["eigenvalues"],
                        tuple(int(e) for e in z["regularized"]))
