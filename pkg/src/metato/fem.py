"""Plane-stress linear elasticity on regular grids of bilinear quads.

Mesh convention follows the classic 88-line SIMP code: nodes and elements
are numbered column-major with the row index growing downwards, two DOFs
per node (x then y), and the physical y axis pointing up.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

# meshes with more elements than this are solved with preconditioned CG
DIRECT_SOLVER_MAX_ELEMENTS = 64 * 64


class SingularSystemError(RuntimeError):
    """Reduced stiffness matrix is not positive definite."""


class SolverNonConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class Discretization:
    nelx: int
    nely: int

    def __post_init__(self):
        if self.nelx < 1 or self.nely < 1:
            raise ValueError(f"mesh must have at least one element, got {self.nelx}x{self.nely}")

    @property
    def n_elem(self) -> int:
        return self.nelx * self.nely

    @property
    def n_nodes(self) -> int:
        return (self.nelx + 1) * (self.nely + 1)

    @property
    def n_dof(self) -> int:
        return 2 * self.n_nodes

    def node(self, ix: int, iy: int) -> int:
        """Node id at column ``ix`` (0..nelx) and row ``iy`` (0..nely, top first)."""
        return (self.nely + 1) * ix + iy

    def element(self, ex: int, ey: int) -> int:
        return self.nely * ex + ey

    @cached_property
    def edof(self) -> np.ndarray:
        """(n_elem, 8) DOF indices, local node order LL, LR, UR, UL."""
        ex, ey = np.meshgrid(np.arange(self.nelx), np.arange(self.nely), indexing="ij")
        n1 = ((self.nely + 1) * ex + ey).ravel()
        n2 = ((self.nely + 1) * (ex + 1) + ey).ravel()
        return np.stack(
            [2 * n1 + 2, 2 * n1 + 3, 2 * n2 + 2, 2 * n2 + 3, 2 * n2, 2 * n2 + 1, 2 * n1, 2 * n1 + 1],
            axis=1,
        )

    @cached_property
    def node_coords(self) -> np.ndarray:
        """Physical (x, y) of every node, y up, origin at the bottom-left corner."""
        ix, iy = np.meshgrid(np.arange(self.nelx + 1), np.arange(self.nely + 1), indexing="ij")
        return np.stack([ix.ravel(), (self.nely - iy).ravel()], axis=1).astype(float)

    @cached_property
    def centroids(self) -> np.ndarray:
        """Element centroids mapped so the domain box becomes [-1, 1]^2."""
        ex, ey = np.meshgrid(np.arange(self.nelx), np.arange(self.nely), indexing="ij")
        x = 2.0 * (ex.ravel() + 0.5) / self.nelx - 1.0
        y = 1.0 - 2.0 * (ey.ravel() + 0.5) / self.nely
        return np.stack([x, y], axis=1)

    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        ix, iy = np.divmod(np.arange(self.n_nodes), self.nely + 1)
        on_edge = (ix == 0) | (ix == self.nelx) | (iy == 0) | (iy == self.nely)
        return np.flatnonzero(on_edge)

    def to_grid(self, values: np.ndarray) -> np.ndarray:
        """Element vector -> (nely, nelx) array, row 0 at the top."""
        return np.asarray(values).reshape(self.nelx, self.nely).T

    def from_grid(self, grid: np.ndarray) -> np.ndarray:
        return np.asarray(grid).T.ravel()


@dataclass(frozen=True)
class MaterialModel:
    E0: float = 1.0
    Emin: float = 1e-9
    nu: float = 0.3
    penal: float = 3.0

    def __post_init__(self):
        if not 0 < self.Emin < self.E0:
            raise ValueError("need 0 < Emin < E0")
        if self.penal < 1:
            raise ValueError("penalization must be >= 1")

    def modulus(self, rho: np.ndarray) -> np.ndarray:
        return self.Emin + rho**self.penal * (self.E0 - self.Emin)


@dataclass(frozen=True, eq=False)
class BoundaryConditions:
    fixed_dofs: np.ndarray
    load_dofs: np.ndarray
    load_values: np.ndarray

    def __post_init__(self):
        fixed = np.unique(np.asarray(self.fixed_dofs, dtype=np.int64))
        dofs = np.asarray(self.load_dofs, dtype=np.int64)
        vals = np.asarray(self.load_values, dtype=float)
        if dofs.shape != vals.shape:
            raise ValueError("load dofs and values differ in length")
        # merge repeated load DOFs so the map is unique and sorted
        merged, inv = np.unique(dofs, return_inverse=True)
        summed = np.zeros(len(merged))
        np.add.at(summed, inv, vals)
        object.__setattr__(self, "fixed_dofs", fixed)
        object.__setattr__(self, "load_dofs", merged)
        object.__setattr__(self, "load_values", summed)

    @classmethod
    def from_point_loads(cls, fixed_dofs, loads) -> BoundaryConditions:
        """``loads`` is an iterable of (node, magnitude, angle in radians)."""
        dofs, vals = [], []
        for node, magnitude, angle in loads:
            dofs += [2 * node, 2 * node + 1]
            vals += [magnitude * np.cos(angle), magnitude * np.sin(angle)]
        return cls(np.asarray(fixed_dofs), np.asarray(dofs), np.asarray(vals))

    def force_vector(self, n_dof: int) -> np.ndarray:
        f = np.zeros(n_dof)
        f[self.load_dofs] = self.load_values
        return f

    def check(self, disc: Discretization) -> None:
        for name, idx in (("fixed", self.fixed_dofs), ("load", self.load_dofs)):
            if len(idx) and (idx.min() < 0 or idx.max() >= disc.n_dof):
                raise ValueError(f"{name} DOF index out of range for {disc}")

    def __eq__(self, other):
        if not isinstance(other, BoundaryConditions):
            return NotImplemented
        return (
            np.array_equal(self.fixed_dofs, other.fixed_dofs)
            and np.array_equal(self.load_dofs, other.load_dofs)
            and np.array_equal(self.load_values, other.load_values)
        )


@dataclass(eq=False)
class FieldState:
    u: np.ndarray
    compliance: float
    energies: np.ndarray
    # u_e^T k0 u_e with unit modulus, reused by the sensitivities
    unit_energies: np.ndarray


def element_stiffness(nu: float) -> np.ndarray:
    """Unit-modulus stiffness of the unit square plane-stress bilinear element."""
    if not -1.0 < nu < 0.5:
        raise ValueError(f"Poisson ratio {nu} outside (-1, 0.5)")
    k = np.array([
        1 / 2 - nu / 6, 1 / 8 + nu / 8, -1 / 4 - nu / 12, -1 / 8 + 3 * nu / 8,
        -1 / 4 + nu / 12, -1 / 8 - nu / 8, nu / 6, 1 / 8 - 3 * nu / 8,
    ])
    idx = np.array([
        [0, 1, 2, 3, 4, 5, 6, 7],
        [1, 0, 7, 6, 5, 4, 3, 2],
        [2, 7, 0, 5, 6, 3, 4, 1],
        [3, 6, 5, 0, 7, 2, 1, 4],
        [4, 5, 6, 7, 0, 1, 2, 3],
        [5, 4, 3, 2, 1, 0, 7, 6],
        [6, 3, 4, 1, 2, 7, 0, 5],
        [7, 2, 1, 4, 3, 6, 5, 0],
    ])
    return k[idx] / (1 - nu**2)


class _ReducedPattern:
    """Sparsity pattern of the stiffness matrix restricted to free DOFs."""

    def __init__(self, disc: Discretization, fixed_dofs: tuple[int, ...]):
        self.free = np.setdiff1d(np.arange(disc.n_dof), np.asarray(fixed_dofs, dtype=np.int64))
        remap = -np.ones(disc.n_dof, dtype=np.int64)
        remap[self.free] = np.arange(len(self.free))
        edof = remap[disc.edof]
        rows = np.repeat(edof, 8, axis=1).ravel()
        cols = np.tile(edof, (1, 8)).ravel()
        self.keep = (rows >= 0) & (cols >= 0)
        self.shape = (len(self.free), len(self.free))
        r, c = rows[self.keep], cols[self.keep]
        # CSC order is column-major, rows sorted within a column
        order = np.lexsort((r, c))
        r, c = r[order], c[order]
        first = np.ones(len(r), dtype=bool)
        first[1:] = (r[1:] != r[:-1]) | (c[1:] != c[:-1])
        self.slot = np.empty(len(r), dtype=np.int64)
        self.slot[order] = np.cumsum(first) - 1
        self.indices = r[first].astype(np.int32)
        self.indptr = np.searchsorted(c[first], np.arange(self.shape[1] + 1)).astype(np.int32)
        self.nnz = len(self.indices)
        # upper-band storage for LAPACK: ab[bw + i - j, j] = K[i, j], i <= j
        ur, uc = r[first], c[first]
        self.upper = ur <= uc
        self.bandwidth = int((uc - ur).max()) if len(ur) else 0
        self.band_index = (self.bandwidth + ur[self.upper] - uc[self.upper], uc[self.upper])

    def data(self, values: np.ndarray) -> np.ndarray:
        return np.bincount(self.slot, weights=values[self.keep], minlength=self.nnz)

    def matrix(self, data: np.ndarray) -> sp.csc_matrix:
        return sp.csc_matrix((data, self.indices, self.indptr), shape=self.shape)

    def band(self, data: np.ndarray) -> np.ndarray:
        ab = np.zeros((self.bandwidth + 1, self.shape[0]))
        ab[self.band_index] = data[self.upper]
        return ab


@lru_cache(maxsize=128)
def _pattern(disc: Discretization, fixed_dofs: tuple[int, ...]) -> _ReducedPattern:
    return _ReducedPattern(disc, fixed_dofs)


@lru_cache(maxsize=16)
def _unit_stiffness(nu: float) -> np.ndarray:
    ke = element_stiffness(nu)
    ke.setflags(write=False)
    return ke


def rigid_modes_restrained(disc: Discretization, fixed_dofs: np.ndarray) -> bool:
    """True when the fixed DOFs remove all three in-plane rigid-body modes.

    With ``Emin > 0`` the mesh is one connected body, so this is exactly the
    condition for the reduced stiffness matrix to be positive definite.
    """
    fixed = np.asarray(fixed_dofs, dtype=np.int64)
    if len(fixed) < 3:
        return False
    xy = disc.node_coords[fixed // 2]
    is_y = (fixed % 2).astype(bool)
    modes = np.zeros((len(fixed), 3))
    modes[~is_y, 0] = 1.0
    modes[is_y, 1] = 1.0
    modes[~is_y, 2] = -xy[~is_y, 1]
    modes[is_y, 2] = xy[is_y, 0]
    return np.linalg.matrix_rank(modes) == 3


def _solve_cholesky(ab: np.ndarray, f: np.ndarray) -> np.ndarray:
    try:
        return sla.solveh_banded(ab, f, lower=False, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"stiffness not positive definite: {exc}") from exc


def _solve_cg(K: sp.csc_matrix, f: np.ndarray, rtol: float = 1e-8) -> np.ndarray:
    diag = K.diagonal()
    if np.any(diag <= 0):
        raise SingularSystemError("non-positive diagonal entry in reduced stiffness")
    M = sp.diags(1.0 / diag)
    maxiter = 10 * K.shape[0]
    u, info = spla.cg(K, f, rtol=rtol, atol=0.0, maxiter=maxiter, M=M)
    if info != 0:
        raise SolverNonConvergenceError(f"CG stopped with info={info} after cap {maxiter}")
    return u


def assemble_solve(
    disc: Discretization,
    bc: BoundaryConditions,
    mat: MaterialModel,
    rho: np.ndarray,
    solver: str = "auto",
) -> FieldState:
    """Solve K(rho) u = f with fixed DOFs eliminated.

    ``solver`` is "direct" (banded Cholesky), "cg" (Jacobi-preconditioned)
    or "auto", which picks direct up to 64x64 elements.
    """
    rho = np.asarray(rho, dtype=float)
    if rho.shape != (disc.n_elem,):
        raise ValueError(f"density has shape {rho.shape}, expected ({disc.n_elem},)")
    if not rigid_modes_restrained(disc, bc.fixed_dofs):
        raise SingularSystemError("boundary conditions leave a rigid-body mode free")

    ke = _unit_stiffness(mat.nu)
    E = mat.modulus(rho)
    pattern = _pattern(disc, tuple(bc.fixed_dofs.tolist()))
    data = pattern.data((E[:, None] * ke.ravel()[None, :]).ravel())
    f = bc.force_vector(disc.n_dof)

    if solver == "auto":
        solver = "direct" if disc.n_elem <= DIRECT_SOLVER_MAX_ELEMENTS else "cg"
    if solver == "direct":
        u_free = _solve_cholesky(pattern.band(data), f[pattern.free])
    elif solver == "cg":
        u_free = _solve_cg(pattern.matrix(data), f[pattern.free])
    else:
        raise ValueError(f"unknown solver {solver!r}")
    if not np.all(np.isfinite(u_free)):
        raise SingularSystemError("non-finite displacements")

    u = np.zeros(disc.n_dof)
    u[pattern.free] = u_free
    ue = u[disc.edof]
    unit = np.einsum("ei,ij,ej->e", ue, ke, ue)
    return FieldState(u=u, compliance=float(f @ u), energies=E * unit, unit_energies=unit)


def compliance_sensitivities(state: FieldState, rho: np.ndarray, mat: MaterialModel) -> np.ndarray:
    """d(compliance)/d(rho_e); the problem is self-adjoint so no extra solve."""
    rho = np.asarray(rho, dtype=float)
    return -mat.penal * rho ** (mat.penal - 1) * (mat.E0 - mat.Emin) * state.unit_energies
