"""Piecewise-linear finite elements: assembly, Dirichlet solves, harmonic
coordinates and periodic cell problems."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (NonPositiveJacobian, SingularSystem, SolverBreakdown,
                     ValidationError)
from .fields import SUBCELL_BARY, TensorField, det_packed, to_matrix, to_packed
from .mesh import Mesh2D, square_mesh


def coefficient_on(mesh, coeff):
    """Per-triangle packed coefficient (m, 3) from a field, scalar, 2x2 matrix,
    per-triangle array, or callable of points."""
    if isinstance(coeff, TensorField):
        return coeff.on_triangles(mesh)
    if callable(coeff):
        return TensorField.from_function(coeff).on_triangles(mesh)
    a = np.asarray(coeff, dtype=float)
    m = mesh.n_triangles
    if a.ndim == 0 or a.shape in ((2, 2), (3,)):
        return TensorField(a).on_triangles(mesh)
    if a.shape == (m,):
        return np.column_stack([a, np.zeros(m), a])
    if a.shape == (m, 3):
        return a.copy()
    if a.shape == (m, 2, 2):
        return to_packed(a)
    raise ValidationError(f"cannot interpret coefficient of shape {a.shape}")


def element_matrices(mesh, coeff):
    """Local stiffness matrices |T| G_T A_T G_T^T, shape (m, 3, 3)."""
    A = to_matrix(coefficient_on(mesh, coeff))
    g = mesh.gradients()
    return np.einsum("mrd,mde,mse->mrs", g, A, g) * mesh.areas()[:, None, None]


def assemble(mesh, coeff) -> sp.csr_matrix:
    """Full stiffness matrix K_ij = int grad(phi_i)^T A grad(phi_j).

    Rows cover every vertex, so the off-diagonal edge conductivities are
    ``-K_ij`` and each row sums to zero.
    """
    ke = element_matrices(mesh, coeff)
    t = mesh.triangles
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    n = mesh.n_vertices
    K = sp.coo_matrix((ke.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    K.sum_duplicates()
    return K


def load_vector(mesh, f):
    """b_i = int f phi_i with the 3-point rule (exact for linear f)."""
    n = mesh.n_vertices
    a = mesh.areas()
    b = np.zeros(n)
    if f is None:
        return b
    if np.isscalar(f):
        np.add.at(b, mesh.triangles.ravel(), np.repeat(a * float(f) / 3.0, 3))
        return b
    p = mesh.vertices[mesh.triangles]
    q = np.einsum("rs,msd->mrd", SUBCELL_BARY, p)  # (m, 3, 2)
    fv = np.asarray(f(q.reshape(-1, 2)), dtype=float).reshape(-1, 3)
    # sum over points r of w_r f(q_r) phi_s(q_r); weights |T|/3
    contrib = np.einsum("mr,rs->ms", fv, SUBCELL_BARY) * (a / 3.0)[:, None]
    np.add.at(b, mesh.triangles.ravel(), contrib.ravel())
    return b


class SPDSolver:
    """Sparse direct factorisation with a conjugate-gradient fallback."""

    def __init__(self, A, rtol=1e-10):
        A = sp.csc_matrix(A)
        self.A = A
        self.rtol = rtol
        d = A.diagonal()
        if A.shape[0] and (np.any(d <= 0) or not np.all(np.isfinite(d))):
            raise SolverBreakdown("system matrix has a non-positive diagonal entry")
        self._lu = None
        try:
            self._lu = spla.splu(A)
        except (RuntimeError, MemoryError):
            self._lu = None

    def solve(self, b):
        b = np.asarray(b, dtype=float)
        if self.A.shape[0] == 0:
            return np.zeros_like(b)
        if self._lu is not None:
            x = self._lu.solve(b)
            if np.all(np.isfinite(x)):
                return x
        return self._cg(b)

    def _cg(self, b):
        if b.ndim == 2:
            return np.column_stack([self._cg(b[:, c]) for c in range(b.shape[1])])
        M = spla.LinearOperator(self.A.shape, matvec=lambda v, d=self.A.diagonal(): v / d)
        x, info = spla.cg(self.A, b, rtol=self.rtol, atol=0.0, maxiter=20 * self.A.shape[0], M=M)
        if info != 0:
            raise SolverBreakdown(f"conjugate gradients failed (info={info})")
        return x


def solve_dirichlet(mesh, coeff, f=None, g=None, K=None):
    """Solve -div(A grad u) = f with u = g on the boundary vertices.

    ``g`` may be a callable, per-vertex array, or per-boundary-vertex array
    (in ``mesh.boundary_vertex`` order), and may carry several columns.
    """
    if K is None:
        K = assemble(mesh, coeff)
    bv = np.flatnonzero(mesh.boundary_vertex)
    iv = np.flatnonzero(~mesh.boundary_vertex)
    if callable(g):
        gb = np.asarray(g(mesh.vertices[bv]), dtype=float)
    elif g is None:
        gb = np.zeros(len(bv))
    else:
        ga = np.asarray(g, dtype=float)
        if ga.ndim == 0:
            gb = np.full(len(bv), float(ga))
        elif ga.shape[0] == mesh.n_vertices:
            gb = ga[bv]
        elif ga.shape[0] == len(bv):
            gb = ga
        else:
            raise ValidationError("boundary data must give one value per vertex or boundary vertex")
    b = load_vector(mesh, f)
    if gb.ndim == 2:
        b = np.repeat(b[:, None], gb.shape[1], axis=1)
    u = np.zeros((mesh.n_vertices,) + gb.shape[1:])
    u[bv] = gb
    if len(iv):
        Kii = K[iv][:, iv]
        rhs = b[iv] - K[iv][:, bv] @ gb
        u[iv] = SPDSolver(Kii).solve(rhs)
    return u


def energy(K, u):
    return float(u @ (K @ u))


# ---------------------------------------------------------------------------
# harmonic coordinates

@dataclass
class HarmonicMap:
    """Vertex images of a piecewise-linear map and its per-triangle Jacobians.

    ``jacobian[t]`` is DF on triangle t, i.e. row a is grad F_a.
    """
    mesh: Mesh2D
    images: np.ndarray
    coeff: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=float)
        g = self.mesh.gradients()
        self.jacobian = np.einsum("mra,mrd->mad", self.images[self.mesh.triangles], g)
        self.det = np.linalg.det(self.jacobian)

    @property
    def injective(self):
        return bool(np.all(self.det > 0))

    def image_mesh(self):
        return Mesh2D(self.images, self.mesh.triangles, self.mesh.ghost)

    def pushforward(self, a):
        """J A J^T / det J per triangle for packed per-triangle ``a``."""
        J = self.jacobian
        A = to_matrix(a)
        return to_packed(np.einsum("mab,mbc,mdc->mad", J, A, J) / self.det[:, None, None])

    def jacobian_ratio(self):
        """Eigenvalue ratio of J^T J per triangle (non-degeneracy diagnostic)."""
        JtJ = np.einsum("mba,mbc->mac", self.jacobian, self.jacobian)
        e = np.linalg.eigvalsh(JtJ)
        return e[:, 0] / e[:, 1]

    def compose(self, func):
        """Values of ``func`` at the mapped vertices (PL composition)."""
        return func(self.images)


def harmonic_coordinates(mesh, coeff, on_noninjective="raise") -> HarmonicMap:
    """F with div(A grad F_i) = 0 and F = x on the boundary."""
    a = coefficient_on(mesh, coeff)
    K = assemble(mesh, a)
    X = solve_dirichlet(mesh, None, None, mesh.vertices, K=K)
    X[mesh.boundary_vertex] = mesh.vertices[mesh.boundary_vertex]
    F = HarmonicMap(mesh, X, a)
    if not F.injective:
        bad = int(np.argmin(F.det))
        msg = f"harmonic map folds triangle {bad} (det {F.det[bad]:.3g})"
        if on_noninjective == "raise":
            raise NonPositiveJacobian(msg)
        warnings.warn(msg, RuntimeWarning)
    return F


# ---------------------------------------------------------------------------
# periodic cell problems

class TorusGrid:
    """Structured n x n grid of the unit square with periodic identification.

    ``mesh`` is the unwrapped grid on (n+1)^2 vertices; ``dof[v]`` maps an
    unwrapped vertex to one of the n^2 torus vertices.
    """

    def __init__(self, n, pattern="right"):
        if n < 2:
            raise ValidationError("torus grid needs n >= 2")
        self.n = n
        self.mesh = square_mesh(n, pattern=pattern)
        m = n + 1
        r, c = np.divmod(np.arange(m * m), m)
        self.dof = (r % n) * n + (c % n)
        self.P = sp.csr_matrix((np.ones(m * m), (np.arange(m * m), self.dof)), shape=(m * m, n * n))

    def cell_points(self):
        return self.mesh.centroids()

    def reduce(self, K):
        return (self.P.T @ K @ self.P).tocsr()

    def mass_weights(self):
        a = self.mesh.areas()
        w = np.zeros(self.mesh.n_vertices)
        np.add.at(w, self.mesh.triangles.ravel(), np.repeat(a / 3.0, 3))
        return self.P.T @ w


@dataclass
class CellProblemSolution:
    grid: TorusGrid
    chi: np.ndarray  # (n^2, 2) torus vertex values for directions e1, e2
    sigma: np.ndarray  # per-triangle packed coefficient
    sigma_e: np.ndarray  # from int sigma (I + grad chi)
    sigma_e_q: np.ndarray  # from int Q with F = y + chi

    @property
    def mean(self):
        return self.grid.mass_weights() @ self.chi


def cell_problem(grid, sigma, constraint="mean"):
    """Correctors chi_l on the torus and the effective tensor.

    The zero-mean condition is imposed by a Lagrange multiplier on the
    lumped-mass weights; ``constraint="none"`` leaves the system singular
    and raises :class:`SingularSystem`.
    """
    if isinstance(grid, int):
        grid = TorusGrid(grid)
    mesh = grid.mesh
    a = coefficient_on(mesh, sigma)
    A = to_matrix(a)
    Kp = grid.reduce(assemble(mesh, a))
    g = mesh.gradients()
    area = mesh.areas()
    # b[:, l] = int grad(phi)^T A e_l
    bl = np.einsum("mrd,mdl->mrl", g, A) * area[:, None, None]
    b = np.zeros((mesh.n_vertices, 2))
    np.add.at(b, mesh.triangles.ravel(), bl.reshape(-1, 2))
    b = grid.P.T @ b
    N = Kp.shape[0]
    if constraint == "none":
        if np.abs(Kp @ np.ones(N)).max() <= 1e-12 * np.abs(Kp).max():
            raise SingularSystem("periodic cell problem has constants in its kernel; impose the mean")
        chi = SPDSolver(Kp).solve(-b)
    elif constraint == "mean":
        w = grid.mass_weights()
        Kb = sp.bmat([[Kp, sp.csr_matrix(w[:, None])], [sp.csr_matrix(w[None, :]), None]], format="csc")
        rhs = np.vstack([-b, np.zeros((1, 2))])
        sol = spla.splu(Kb).solve(rhs)
        if not np.all(np.isfinite(sol)):
            raise SingularSystem("bordered cell system is singular")
        chi = sol[:N]
    else:
        raise ValidationError(f"unknown constraint {constraint!r}")
    chi_full = grid.P @ chi
    # gc[m, l, d] = d chi_l / d y_d ; J = I + gc is DF for F = y + chi
    gc = np.einsum("mrl,mrd->mld", chi_full[mesh.triangles], g)
    J = np.eye(2)[None] + gc
    JT = np.transpose(J, (0, 2, 1))
    sigma_e = np.einsum("m,mab,mbc->ac", area, A, JT)
    sigma_e_q = np.einsum("m,mab,mbc,mdc->ad", area, J, A, J)
    return CellProblemSolution(grid, chi, a, sigma_e, sigma_e_q)


def torus_sigma(grid, func):
    """Per-triangle packed sigma on a torus grid from ``func(points)``."""
    return TensorField.from_function(func).on_triangles(grid.mesh)


__all__ = [
    "assemble", "load_vector", "solve_dirichlet", "harmonic_coordinates", "HarmonicMap",
    "TorusGrid", "cell_problem", "CellProblemSolution", "SPDSolver", "coefficient_on",
    "element_matrices", "energy", "det_packed",
]
