"""Effective edge conductivities, the homogenized finite-difference problem,
and the coarsening operators between nested scales."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (GaugeDeficiency, IncompleteHinge, MeshMismatch,
                     ValidationError)
from .fem import SPDSolver, assemble, coefficient_on, harmonic_coordinates, load_vector
from .mesh import TriangleLocator, hinge_arrays
from .fields import SField


class EdgeConductivities:
    """q^h on the edges of a mesh; NaN marks edges without a value.

    ``composition`` (optional) is the matrix whose column i holds the coarse
    hat phi_i composed with the harmonic coordinates, sampled at fine
    vertices; it reconstructs fine-scale functions from coarse values.
    """

    def __init__(self, mesh, values, composition=None, harmonic_map=None, fine_mesh=None):
        v = np.asarray(values, dtype=float).reshape(-1)
        if v.shape != (mesh.n_edges,):
            raise MeshMismatch(f"expected {mesh.n_edges} edge values, got {v.shape}")
        self.mesh = mesh
        self.values = v
        self.composition = composition
        self.harmonic_map = harmonic_map
        self.fine_mesh = fine_mesh

    def __getitem__(self, ij):
        return self.values[self.mesh.edge_index(*ij)]

    @property
    def has_boundary(self):
        return bool(np.all(np.isfinite(self.values)))

    def interior(self):
        return self.values[self.mesh.interior_edge]

    def laplacian(self, fill=None):
        """Graph Laplacian L_ij = -q_ij, L_ii = sum_j q_ij over present edges.

        Missing entries are dropped, or replaced by ``fill`` when given.
        """
        q = self.values.copy()
        if fill is not None:
            q[~np.isfinite(q)] = fill
        ok = np.isfinite(q)
        e = self.mesh.edges[ok]
        w = q[ok]
        n = self.mesh.n_vertices
        L = sp.coo_matrix((np.concatenate([-w, -w]), (np.concatenate([e[:, 0], e[:, 1]]),
                                                      np.concatenate([e[:, 1], e[:, 0]]))),
                          shape=(n, n)).tocsr()
        return (L - sp.diags(np.asarray(L.sum(axis=1)).ravel())).tocsr()

    def identity_residual(self):
        """Per interior (non-ghost) vertex: q_ii (l.x_i) + sum_j q_ij (l.x_j)
        for l = e1, e2, shape (n_checked, 2)."""
        L = self.laplacian()
        r = -(L @ self.mesh.vertices)
        mask = self.mesh.interior_vertex & ~self.mesh.ghost
        bad = _rows_missing(self)
        if np.any(bad[mask]):
            raise IncompleteHinge("interior vertex with a missing edge value")
        return r[mask]

    def scale(self):
        q = self.values[np.isfinite(self.values)]
        return float(np.abs(q).max() * self.mesh.diameter()) if len(q) else 0.0

    def is_divergence_free(self, tol=1e-8):
        r = self.identity_residual()
        return bool(len(r) == 0 or np.abs(r).max() <= tol * max(self.scale(), 1e-300))

    def min_form_eigenvalue(self):
        """Smallest eigenvalue of the quadratic form on interior vertices."""
        L = self.laplacian(fill=0.0)
        iv = np.flatnonzero(self.mesh.interior_vertex & ~self.mesh.ghost)
        A = L[iv][:, iv].toarray()
        return float(np.linalg.eigvalsh(A)[0]) if len(iv) else 0.0

    def to_csv(self):
        lines = [f"# mesh {self.mesh.hash()}", "i,j,q"]
        for (i, j), q in zip(self.mesh.edges, self.values):
            if np.isfinite(q):
                lines.append(f"{i},{j},{float(q)!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, mesh, text, check_hash=True):
        vals = np.full(mesh.n_edges, np.nan)
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if check_hash and len(parts) == 2 and parts[0] == "mesh" and parts[1] != mesh.hash():
                    raise MeshMismatch("edge file was written for a different mesh")
                continue
            if line.startswith("i,"):
                continue
            i, j, q = line.split(",")
            vals[mesh.edge_index(int(i), int(j))] = float(q)
        return cls(mesh, vals)

    def __repr__(self):
        return f"EdgeConductivities({self.mesh!r}, present={int(np.isfinite(self.values).sum())})"


def _rows_missing(qh):
    bad = np.zeros(qh.mesh.n_vertices, dtype=bool)
    miss = ~np.isfinite(qh.values)
    bad[qh.mesh.edges[miss].ravel()] = True
    return bad


def _edge_values_from_matrix(mesh, K, boundary=False):
    K = sp.csr_matrix(K)
    i, j = mesh.edges[:, 0], mesh.edges[:, 1]
    q = -np.asarray(K[i, j]).ravel()
    if not boundary:
        q[mesh.boundary_edge] = np.nan
    return q


# ---------------------------------------------------------------------------
# three routes to q^h

def qh_from_q(coarse, q, boundary=False) -> EdgeConductivities:
    """Volume averaging: q_ij = -int grad(phi_i)^T Q grad(phi_j) on the coarse mesh."""
    K = assemble(coarse, q)
    return EdgeConductivities(coarse, _edge_values_from_matrix(coarse, K, boundary))


def composed_hats(coarse, points):
    """Matrix Phi[k, i] = phi_i(points[k]) for coarse hats (sparse, 3 per row)."""
    tri, bary = TriangleLocator(coarse).locate(points)
    rows = np.repeat(np.arange(len(points)), 3)
    cols = coarse.triangles[tri].ravel()
    Phi = sp.csr_matrix((bary.ravel(), (rows, cols)), shape=(len(points), coarse.n_vertices))
    Phi.eliminate_zeros()
    return Phi


def qh_from_sigma(coarse, sigma, fine=None, levels=3, F=None, boundary=False) -> EdgeConductivities:
    """q_ij = -int grad(phi_i o F)^T sigma grad(phi_j o F) with phi o F
    represented as piecewise-linear on the fine mesh.

    ``fine`` defaults to ``levels`` uniform refinements of ``coarse``; a
    precomputed harmonic map ``F`` on the fine mesh may be passed.
    """
    from .mesh import refine
    if F is None:
        if fine is None:
            fine, _ = refine(coarse, levels)
        F = harmonic_coordinates(fine, sigma)
    fine = F.mesh
    a = F.coeff if F.coeff is not None else coefficient_on(fine, sigma)
    Kf = assemble(fine, a)
    Phi = composed_hats(coarse, F.images)
    Kc = (Phi.T @ Kf @ Phi).tocsr()
    return EdgeConductivities(coarse, _edge_values_from_matrix(coarse, Kc, boundary),
                              composition=Phi, harmonic_map=F, fine_mesh=fine)


def hinge_matrix(mesh, edges=None):
    """Sparse linear map s -> q^h on the given (default: interior) edges."""
    h = hinge_arrays(mesh, edges)
    ne = len(h["edge"])
    rows = np.repeat(np.arange(ne), 4)
    cols = np.column_stack([h["i"], h["j"], h["k"], h["l"]]).ravel()
    vals = np.column_stack([
        -(h["cot_ijk"] + h["cot_ijl"]) / h["len2"],
        -(h["cot_jik"] + h["cot_jil"]) / h["len2"],
        0.5 / h["area_ijk"],
        0.5 / h["area_ijl"],
    ]).ravel()
    return sp.csr_matrix((vals, (rows, cols)), shape=(ne, mesh.n_vertices)), h["edge"]


def qh_from_sh(mesh, sh, require_boundary=False) -> EdgeConductivities:
    """Hinge formula on every interior edge of ``mesh``.

    On a mesh with ghosts the physical boundary edges are interior and get
    values; otherwise boundary entries are NaN (or :class:`IncompleteHinge`
    with ``require_boundary``).
    """
    if isinstance(sh, SField) and sh.kind == "analytic":
        # sample in extended precision; rounding of s is amplified by 1/area on slivers
        s = np.asarray(sh.f(mesh.vertices.astype(np.longdouble))).reshape(-1)
    else:
        s = np.asarray(sh.data if hasattr(sh, "data") and not isinstance(sh, np.ndarray) else sh,
                       dtype=float).reshape(-1)
    if len(s) != mesh.n_vertices:
        raise MeshMismatch("one s value per mesh vertex required")
    if require_boundary and not mesh.ghost.any():
        raise IncompleteHinge("boundary edges have no full hinge; add a ghost layer")
    q = np.full(mesh.n_edges, np.nan)
    edges = np.flatnonzero(mesh.interior_edge)
    q[edges] = _hinge_values(mesh, edges, s)
    return EdgeConductivities(mesh, q)


def _hinge_values(mesh, edges, s):
    """Hinge formula evaluated as the jump of s_l over the plane through
    (i, j, k), using differences from vertex i.  Same value as the hinge
    matrix, without the cancellation between its large coefficients on
    thin triangles."""
    h = hinge_arrays(mesh, edges)
    v = mesh.vertices.astype(np.longdouble)
    s = np.asarray(s, dtype=np.longdouble)
    i = h["i"]
    dj, dk, dl = (v[h[c]] - v[i] for c in ("j", "k", "l"))
    tj, tk, tl = (s[h[c]] - s[i] for c in ("j", "k", "l"))
    det = dj[:, 0] * dk[:, 1] - dj[:, 1] * dk[:, 0]
    num = (tl * det - dl[:, 0] * (dk[:, 1] * tj - dj[:, 1] * tk)
           - dl[:, 1] * (dj[:, 0] * tk - dk[:, 0] * tj))
    return (0.5 * num / (det * h["area_ijl"])).astype(float)


def sh_from_s(mesh, s):
    """Vertex samples of s (ghosts included)."""
    if hasattr(s, "values") and callable(s.values):
        return s.values(mesh.vertices)
    return np.asarray(s(mesh.vertices), dtype=float)


def gauge_vertices(mesh):
    """Three non-collinear vertices used to pin the affine gauge."""
    return mesh.triangles[0].copy()


def sh_from_qh(qh, pins=None, check_rank=None):
    """Least-squares inverse of the hinge formula with three pinned vertices.

    Returns ``(s, residual)`` where ``residual`` is the max |H s - q| over
    the edges with values.  Raises :class:`GaugeDeficiency` when the hinge
    system has rank below V - 3.
    """
    mesh = qh.mesh
    H, edges = hinge_matrix(mesh)
    q = qh.values[edges]
    ok = np.isfinite(q)
    H, q = H[ok], q[ok]
    n = mesh.n_vertices
    pins = gauge_vertices(mesh) if pins is None else np.asarray(pins)
    free = np.setdiff1d(np.arange(n), pins)
    A = H[:, free].tocsc()
    if check_rank is None:
        check_rank = n <= 1500
    if check_rank:
        rank = np.linalg.matrix_rank(H.toarray())
        if rank < n - 3:
            raise GaugeDeficiency(f"hinge system rank {rank} < V - 3 = {n - 3}")
    N = (A.T @ A).tocsc()
    try:
        lu = spla.splu(N)
    except RuntimeError:
        raise GaugeDeficiency("hinge normal equations are singular") from None
    rhs = A.T @ q
    x = lu.solve(rhs)
    for _ in range(3):  # corrected seminormal refinement on the true residual
        x += lu.solve(A.T @ (q - A @ x))
    if not np.all(np.isfinite(x)):
        raise GaugeDeficiency("hinge normal equations are singular")
    s = np.zeros(n)
    s[free] = x
    resid = float(np.abs(H @ s - q).max()) if len(q) else 0.0
    return s, resid


def normalize_affine(mesh, s, pins=None):
    """Subtract the affine function matching s at three pinned vertices."""
    pins = gauge_vertices(mesh) if pins is None else np.asarray(pins)
    p = mesh.vertices[pins]
    A = np.column_stack([np.ones(3), p])
    c = np.linalg.solve(A, s[pins])
    return s - (c[0] + mesh.vertices @ c[1:])


# ---------------------------------------------------------------------------
# homogenized problem

@dataclass
class CoarseSolution:
    qh: EdgeConductivities
    values: np.ndarray  # per coarse vertex, zero on the boundary

    def reconstruct(self):
        """u_h = sum u_i phi_i o F on the fine mesh (needs the composition)."""
        if self.qh.composition is None:
            raise ValidationError("no composed hats attached to these conductivities")
        return self.qh.composition @ self.values


def homogenized_load(qh, f):
    """b_i = int f (phi_i o F): coarse load through the composed hats, or the
    plain coarse load when no composition is attached."""
    if qh.composition is None:
        return load_vector(qh.mesh, f)
    return qh.composition.T @ load_vector(qh.fine_mesh, f)


def solve_homogenized(qh, rhs) -> CoarseSolution:
    """Solve sum_j q_ij (u_i - u_j) = b_i at interior vertices, u = 0 on the
    boundary."""
    mesh = qh.mesh
    b = np.asarray(rhs, dtype=float)
    iv = np.flatnonzero(mesh.interior_vertex & ~mesh.ghost)
    if np.any(_rows_missing(qh)[iv]):
        raise IncompleteHinge("interior vertex with a missing edge value")
    L = qh.laplacian()
    u = np.zeros(mesh.n_vertices)
    u[iv] = SPDSolver(L[iv][:, iv]).solve(b[iv])
    return CoarseSolution(qh, u)


# ---------------------------------------------------------------------------
# semi-group operators

def coarsen_qh(fine_qh, P, coarse) -> EdgeConductivities:
    """Galerkin triple product q^C_ij = sum_kl phi_ik phi_jl q^F_kl, where the
    sum includes the diagonal terms q_kk = -sum_l q_kl.

    Coarse edges whose endpoints both lie on the boundary depend on fine
    boundary entries and are NaN when those are absent.
    """
    P = sp.csr_matrix(P)
    if P.shape != (fine_qh.mesh.n_vertices, coarse.n_vertices):
        raise MeshMismatch(f"prolongation shape {P.shape} does not match the meshes")
    Lc = (P.T @ fine_qh.laplacian(fill=0.0) @ P).tocsr()
    q = _edge_values_from_matrix(coarse, Lc, boundary=True)
    if not fine_qh.has_boundary:
        i, j = coarse.edges[:, 0], coarse.edges[:, 1]
        q[coarse.boundary_vertex[i] & coarse.boundary_vertex[j]] = np.nan
    return EdgeConductivities(coarse, q)


def injection(P):
    """Fine vertex index of every coarse vertex (rows of P equal to a unit vector)."""
    P = sp.csc_matrix(P)
    out = np.empty(P.shape[1], dtype=np.int64)
    for i in range(P.shape[1]):
        rows = P.indices[P.indptr[i]:P.indptr[i + 1]]
        vals = P.data[P.indptr[i]:P.indptr[i + 1]]
        hit = rows[vals == 1.0]
        if len(hit) != 1:
            raise MeshMismatch(f"coarse vertex {i} is not a fine vertex")
        out[i] = hit[0]
    return out


def restrict_sh(fine_sh, P):
    """Interpolation semi-group: coarse s^h is the fine s^h at coarse vertices."""
    return np.asarray(fine_sh, dtype=float)[injection(P)]


def hinge_energy(mesh, sh, u):
    """Discrete Dirichlet energy sum over interior edges q_ij (u_i - u_j)^2."""
    H, edges = hinge_matrix(mesh)
    q = H @ np.asarray(sh, dtype=float)
    e = mesh.edges[edges]
    return float(np.sum(q * (u[e[:, 0]] - u[e[:, 1]]) ** 2))


def _rel_dev(a, b):
    ok = np.isfinite(a) & np.isfinite(b)
    scale = max(float(np.abs(b[ok]).max()) if ok.any() else 0.0, 1e-300)
    return float(np.abs(a[ok] - b[ok]).max() / scale) if ok.any() else 0.0


def semigroup_check(coarse, sigma, levels=3, fine_levels=2):
    """Deviations from the semi-group identities on ``levels`` nested meshes.

    The meshes are ``coarse`` and its successive uniform refinements; the
    harmonic coordinates live ``fine_levels`` refinements below the finest.
    Returns relative max deviations:

    ``qh``      coarsening finest -> coarsest directly vs through every level
    ``sh``      restricting s^h finest -> coarsest directly vs through every level
    ``sigma``   q^h computed from sigma on each level vs the coarsened finest q^h;
                approximate only, since discrete composed hats also couple
                coarse vertices that share no edge and those entries are dropped
    """
    from .mesh import refine
    if levels < 3:
        raise ValidationError("need at least three levels")
    meshes, Ps = [coarse], []
    for _ in range(levels - 1):
        m, P = refine(meshes[-1])
        meshes.append(m)
        Ps.append(P)
    fine, _ = refine(meshes[-1], fine_levels)
    F = harmonic_coordinates(fine, sigma)
    qh = [qh_from_sigma(m, sigma, F=F, boundary=True) for m in meshes]
    # P_total maps coarsest hats to finest vertices
    P_total = Ps[0]
    for P in Ps[1:]:
        P_total = (P @ P_total).tocsr()
    direct = coarsen_qh(qh[-1], P_total, meshes[0])
    step = qh[-1]
    for k in range(levels - 2, -1, -1):
        step = coarsen_qh(step, Ps[k], meshes[k])
    out = {"qh": _rel_dev(step.values, direct.values)}
    s_fine = np.sum(F.images ** 2, axis=1)[: meshes[-1].n_vertices]
    s_direct = restrict_sh(s_fine, P_total)
    s_step = s_fine
    for k in range(levels - 2, -1, -1):
        s_step = restrict_sh(s_step, Ps[k])
    out["sh"] = _rel_dev(s_step, s_direct)
    dev = 0.0
    for k in range(levels - 1):
        Pk = Ps[k]
        for P in Ps[k + 1:]:
            Pk = (P @ Pk).tocsr()
        dev = max(dev, _rel_dev(coarsen_qh(qh[-1], Pk, meshes[k]).values, qh[k].values))
    out["sigma"] = dev
    return out


__all__ = [
    "semigroup_check", "EdgeConductivities", "qh_from_q", "qh_from_sigma", "qh_from_sh", "sh_from_s",
    "sh_from_qh", "solve_homogenized", "coarsen_qh", "restrict_sh", "hinge_matrix",
    "composed_hats", "homogenized_load", "CoarseSolution", "normalize_affine",
    "hinge_energy",
]
