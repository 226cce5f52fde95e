"""Electrical impedance tomography with boundary data at finitely many points:
discrete Dirichlet-to-Neumann maps, forward simulation, the coarse network
fit, and the two reconstruction pipelines."""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.optimize import least_squares, linprog

from .errors import (IncompleteHinge, InfeasibleLP, InfeasibleStart, MeshMismatch,
                     NonConvergenceWarning, SingularStencil, SolverBreakdown,
                     ValidationError)
from .fem import SPDSolver, assemble, coefficient_on, harmonic_coordinates
from .fields import SigmaField, eigvals_packed
from .homogenize import EdgeConductivities, composed_hats, hinge_matrix, qh_from_q
from .mesh import Mesh2D, add_ghost_layer, delaunay, polygon_mesh, refine
from .predicates import orient2d

# ---------------------------------------------------------------------------
# DtN matrices


class DtNMatrix:
    """Discrete Dirichlet-to-Neumann map over ordered boundary points.

    ``matrix[a, b]`` is the current at point a for unit potential at point b
    and zero at the others.  Symmetric with the constants in its nullspace.
    """

    def __init__(self, matrix, points, provenance="discrete", tol=1e-8):
        A = np.asarray(matrix, dtype=float)
        P = np.asarray(points, dtype=float).reshape(-1, 2)
        if A.shape != (len(P), len(P)):
            raise ValidationError(f"DtN matrix shape {A.shape} does not match {len(P)} points")
        if not np.all(np.isfinite(A)):
            raise ValidationError("DtN matrix has non-finite entries")
        scale = max(np.abs(A).max(), 1e-300)
        if np.abs(A - A.T).max() > tol * scale:
            raise ValidationError("DtN matrix is not symmetric")
        if np.abs(A.sum(axis=1)).max() > tol * scale:
            raise ValidationError("DtN matrix rows do not sum to zero")
        self.matrix = 0.5 * (A + A.T)
        self.points = P
        self.provenance = provenance

    @property
    def n(self):
        return len(self.points)

    @property
    def free_parameters(self):
        return self.n * (self.n - 1) // 2

    def norm(self):
        return float(np.linalg.norm(self.matrix, 2))

    def boundary_weights(self):
        """Trapezoidal L2 weights: half the lengths of the two adjacent sides."""
        p = self.points
        d = np.linalg.norm(np.roll(p, -1, 0) - p, axis=1)
        return 0.5 * (d + np.roll(d, 1))

    def scaled(self, c):
        return DtNMatrix(c * self.matrix, self.points, self.provenance)

    def with_noise(self, level, rng):
        """Additive symmetric Gaussian noise of relative size ``level``."""
        E = rng.normal(size=self.matrix.shape)
        E = 0.5 * (E + E.T)
        E -= E.mean(axis=1, keepdims=True) + E.mean(axis=0, keepdims=True) - E.mean()
        E *= level * self.norm() / max(np.linalg.norm(E, 2), 1e-300)
        return DtNMatrix(self.matrix + E, self.points, self.provenance + "+noise", tol=1e-6)

    def to_csv(self, header=()):
        lines = [f"# {h}" for h in header]
        lines.append(f"# provenance {self.provenance}")
        lines.append("x," + ",".join(repr(float(v)) for v in self.points[:, 0]))
        lines.append("y," + ",".join(repr(float(v)) for v in self.points[:, 1]))
        for row in self.matrix:
            lines.append("," + ",".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text):
        xs = ys = None
        rows, prov = [], "discrete"
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) == 2 and parts[0] == "provenance":
                    prov = parts[1]
                continue
            head, _, rest = line.partition(",")
            vals = [float(v) for v in rest.split(",")]
            if head == "x":
                xs = vals
            elif head == "y":
                ys = vals
            else:
                rows.append(vals)
        if xs is None or ys is None:
            raise ValidationError("DtN file lacks the x/y header rows")
        return cls(np.array(rows), np.column_stack([xs, ys]), prov, tol=1e-6)

    def __repr__(self):
        return f"DtNMatrix(n={self.n}, provenance={self.provenance!r})"


def dtn_misfit(A, target):
    """Relative spectral-norm misfit ||A - target|| / ||target||."""
    a = A.matrix if isinstance(A, DtNMatrix) else np.asarray(A)
    return float(np.linalg.norm(a - target.matrix, 2) / target.norm())


class ThresholdedNorm:
    """Spectral norm of the misfit in the eigenbasis of the target, with the
    modes of small target eigenvalue down-weighted."""

    def __init__(self, target, threshold=1e-3, low_weight=0.1):
        d, V = np.linalg.eigh(target.matrix)
        self.V = V
        self.scale = max(np.abs(d).max(), 1e-300)
        self.sw = np.sqrt(np.where(np.abs(d) < threshold * self.scale, low_weight, 1.0))
        self.target = target.matrix

    def weighted(self, A):
        E = self.V.T @ (A - self.target) @ self.V
        return self.sw[:, None] * E * self.sw[None, :]

    def __call__(self, A):
        return float(np.linalg.norm(self.weighted(A), 2) / self.scale)


# ---------------------------------------------------------------------------
# resistor networks


def _boundary_order(mesh, points=None, tol=1e-9):
    """Physical boundary vertices, in ``points`` order when given."""
    phys = np.flatnonzero(~mesh.ghost)
    pm = mesh.physical()
    loop = phys[pm.boundary_loop()]
    if points is None:
        return loop
    P = np.asarray(points, dtype=float)
    V = mesh.vertices[loop]
    d = np.linalg.norm(P[:, None, :] - V[None], axis=2)
    k = d.argmin(axis=1)
    if np.any(d[np.arange(len(P)), k] > tol * mesh.diameter()):
        raise MeshMismatch("boundary points are not vertices of the mesh boundary")
    return loop[k]


class Network:
    """Conductances on a set of edges with designated boundary vertices."""

    def __init__(self, mesh, edges, boundary):
        self.mesh = mesh
        self.edges = np.asarray(edges, dtype=int).reshape(-1, 2)
        self.B = np.asarray(boundary, dtype=int)
        used = np.unique(self.edges)
        self.I = np.setdiff1d(used, self.B)
        self.nodes = np.concatenate([self.B, self.I])
        loc = np.full(mesh.n_vertices, -1)
        loc[self.nodes] = np.arange(len(self.nodes))
        if np.any(loc[self.edges] < 0):
            raise ValidationError("edge touches a vertex outside the network")
        e = loc[self.edges]
        ne = len(e)
        self.D = sp.csr_matrix((np.r_[np.ones(ne), -np.ones(ne)],
                                (np.r_[np.arange(ne), np.arange(ne)], np.r_[e[:, 0], e[:, 1]])),
                               shape=(ne, len(self.nodes)))
        self.nb = len(self.B)

    @classmethod
    def from_qh(cls, qh, points=None):
        mesh = qh.mesh
        phys = ~mesh.ghost[mesh.edges].any(axis=1)
        if np.any(~np.isfinite(qh.values[phys])):
            raise IncompleteHinge("network needs a value on every physical edge, boundary included")
        net = cls(mesh, mesh.edges[phys], _boundary_order(mesh, points))
        net.edge_ids = np.flatnonzero(phys)
        return net, qh.values[phys]

    def laplacian(self, q):
        return (self.D.T @ sp.diags(q) @ self.D).toarray()

    def extension(self, q):
        """Harmonic extension of the boundary basis (nodes x nb) and the DtN."""
        L = self.laplacian(q)
        nb = self.nb
        U = np.zeros((len(self.nodes), nb))
        U[:nb] = np.eye(nb)
        if len(self.I):
            Lii = L[nb:, nb:]
            try:
                cf = sla.cho_factor(Lii)
            except np.linalg.LinAlgError:
                raise SolverBreakdown("interior network matrix is not positive definite") from None
            U[nb:] = -sla.cho_solve(cf, L[nb:, :nb])
        Lam = L[:nb] @ U
        return U, 0.5 * (Lam + Lam.T)

    def dtn(self, q):
        return self.extension(q)[1]

    def divergence_residual(self, q, positions=None):
        """sum_j q_ij (x_i - x_j) at interior nodes, shape (n_I, 2)."""
        X = (self.mesh.vertices if positions is None else positions)[self.nodes]
        return (self.laplacian(q) @ X)[self.nb:]


def discrete_dtn(qh, points=None) -> DtNMatrix:
    """Discrete DtN map of a network with boundary edge values.

    Ghost vertices (if any) are excluded; boundary vertices follow
    ``points`` when given, else the counter-clockwise boundary loop.
    """
    net, q = Network.from_qh(qh, points)
    return DtNMatrix(net.dtn(q), qh.mesh.vertices[net.B], "discrete")


def schur_dtn(L, boundary):
    """Schur complement of a full conductance matrix onto ``boundary``."""
    L = np.asarray(L.toarray() if sp.issparse(L) else L, dtype=float)
    b = np.asarray(boundary)
    i = np.setdiff1d(np.arange(L.shape[0]), b)
    return L[np.ix_(b, b)] - L[np.ix_(b, i)] @ np.linalg.solve(L[np.ix_(i, i)], L[np.ix_(i, b)])


# ---------------------------------------------------------------------------
# forward problem


def boundary_hats(mesh, points, boundary=None):
    """Matrix G (n_boundary_vertices x n_points) of piecewise-linear hats along
    the polygon through ``points`` evaluated at the mesh boundary vertices."""
    P = np.asarray(points, dtype=float)
    bv = _boundary_order(mesh) if boundary is None else boundary
    X = mesh.vertices[bv]
    n = len(P)
    G = np.zeros((len(bv), n))
    A, Bp = P, np.roll(P, -1, 0)
    for r, x in enumerate(X):
        e = Bp - A
        t = np.einsum("kd,kd->k", x - A, e) / np.einsum("kd,kd->k", e, e)
        off = np.linalg.norm(A + t[:, None] * e - x, axis=1)
        ok = (t >= -1e-9) & (t <= 1 + 1e-9)
        k = int(np.argmin(np.where(ok, off, np.inf)))
        if not ok[k] or off[k] > 1e-9 * mesh.diameter():
            raise MeshMismatch("mesh boundary does not lie on the measurement polygon")
        tt = float(np.clip(t[k], 0.0, 1.0))
        G[r, k] += 1.0 - tt
        G[r, (k + 1) % n] += tt
    return G, bv


def _sigma_values(sigma, mesh):
    if hasattr(sigma, "sigma") and isinstance(sigma.sigma, SigmaField):  # Phantom
        sigma = sigma.sigma
    return coefficient_on(mesh, sigma)


def forward_dtn(phantom, points, h=0.05, mesh=None, seed=0) -> DtNMatrix:
    """DtN of the continuum problem for hat Dirichlet data at ``points``.

    Solved on ``mesh`` (default: a Delaunay mesh of the polygon through
    ``points`` with spacing ``h``) and read out as the Schur complement of
    the fine stiffness matrix onto the boundary, restricted to the hats.
    """
    P = np.asarray(points, dtype=float)
    if mesh is None:
        mesh, _ = polygon_mesh(P, h, seed=seed)
    K = assemble(mesh, _sigma_values(phantom, mesh)).tocsr()
    G, bv = boundary_hats(mesh, P)
    iv = np.setdiff1d(np.arange(mesh.n_vertices), bv)
    KbG = K[bv][:, bv] @ G
    KiG = K[iv][:, bv] @ G
    Ui = -SPDSolver(K[iv][:, iv]).solve(KiG) if len(iv) else np.zeros((0, len(P)))
    Lam = G.T @ KbG + KiG.T @ Ui
    Lam = 0.5 * (Lam + Lam.T)
    drift = np.abs(Lam.sum(axis=1)).max() / max(np.abs(Lam).max(), 1e-300)
    if drift > 1e-4:
        raise SolverBreakdown(f"forward solve lost the constant nullspace (relative {drift:.2g})")
    # remove round-off from the nullspace: Lam <- C Lam C with C the centering projector
    Lam -= Lam.mean(axis=1, keepdims=True)
    Lam -= Lam.mean(axis=0, keepdims=True)
    return DtNMatrix(Lam, P, "continuum")


# ---------------------------------------------------------------------------
# coarse network fit by constrained simulated annealing


@dataclass
class CoarseFit:
    mesh: Mesh2D
    qh: EdgeConductivities
    misfit: float  # thresholded spectral norm, relative
    divergence: float  # max relative divergence residual
    history: list = field(default_factory=list)  # best misfit per temperature
    converged: bool = True

    def __iter__(self):
        yield self.mesh
        yield self.qh


def _tri_edges(tris):
    e = np.sort(np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]]), axis=1)
    return np.unique(e, axis=0)


class _AnnealState:
    def __init__(self, pts, tris, z, nb, fixed_mesh):
        self.pts = pts
        self.tris = tris
        self.z = z  # dict edge -> log q
        self.nb = nb
        self.fixed_mesh = fixed_mesh

    def copy(self):
        return _AnnealState(self.pts.copy(), self.tris.copy(), dict(self.z), self.nb, self.fixed_mesh)


def _evaluate(state, norm):
    """(objective, relative divergence residual, DtN, vertex positions).

    Outside fixed-mesh mode the interior vertices are placed at the
    q-weighted harmonic embedding of the boundary polygon, which satisfies
    the discrete divergence-free identities exactly.
    """
    edges = _tri_edges(state.tris)
    q = np.exp(np.array([state.z[tuple(e)] for e in edges]))
    n, nb = len(state.pts), state.nb
    L = np.zeros((n, n))
    i, j = edges[:, 0], edges[:, 1]
    np.add.at(L, (i, j), -q)
    np.add.at(L, (j, i), -q)
    np.add.at(L, (i, i), q)
    np.add.at(L, (j, j), q)
    pts = state.pts
    if n > nb:
        try:
            cf = sla.cho_factor(L[nb:, nb:])
        except np.linalg.LinAlgError:
            return np.inf, np.inf, None, pts
        X = sla.cho_solve(cf, L[nb:, :nb])
        if not state.fixed_mesh:
            pts = np.vstack([pts[:nb], -X @ pts[:nb]])
            if not _valid(pts, state.tris):
                return np.inf, np.inf, None, pts
    else:
        X = np.zeros((0, nb))
    Lam = L[:nb, :nb] - L[:nb, nb:] @ X
    Lam = 0.5 * (Lam + Lam.T)
    r = (L @ pts)[nb:]
    scale = q.max() * np.ptp(pts[:nb], axis=0).max()
    div = float(np.abs(r).max() / scale) if n > nb else 0.0
    return norm(Lam), div, Lam, pts


def _flip(state, rng):
    """Flip a random interior edge whose opposite diagonal is not yet an edge."""
    tris = state.tris
    edges = _tri_edges(tris)
    existing = {tuple(e) for e in edges}
    for c in rng.permutation(len(edges))[:10]:
        a, b = edges[c]
        mask = (tris == a).any(axis=1) & (tris == b).any(axis=1)
        t = np.flatnonzero(mask)
        if len(t) != 2:
            continue
        t1, t2 = t
        r1 = int(np.flatnonzero(tris[t1] == a)[0])
        if tris[t1][(r1 + 1) % 3] != b:  # orient so that t1 holds a -> b
            t1, t2 = t2, t1
            r1 = int(np.flatnonzero(tris[t1] == a)[0])
        k = tris[t1][(r1 + 2) % 3]
        l = int(np.setdiff1d(tris[t2], [a, b])[0])
        if (min(k, l), max(k, l)) in existing:
            continue
        new = tris.copy()
        new[t1] = [a, l, k]
        new[t2] = [l, b, k]
        state.z[(min(k, l), max(k, l))] = state.z.pop((min(a, b), max(a, b)))
        state.tris = new
        return True
    return False


def _valid(pts, tris):
    p = pts[tris]
    return bool(np.all(orient2d(p[:, 0], p[:, 1], p[:, 2]) > 0))


def default_interior_count(nb):
    """Interior vertices giving a triangulation with as many free parameters
    as the DtN map of ``nb`` points."""
    return max(0, int(np.ceil((nb * (nb - 1) / 2 - 2 * nb + 3) / 3)))


def fit_coarse_network(target: DtNMatrix, n_interior=None, seed=0, mesh=None, n_temps=150,
                       moves=200, cooling=0.98, threshold=1e-3, low_weight=0.1,
                       div_weight=10.0, polish=True, q_range=20.0) -> CoarseFit:
    """Fit a coarse triangulation and positive edge values to ``target``.

    Constrained simulated annealing over edge flips and log edge values.
    Interior vertices follow the harmonic embedding of the current values,
    which makes the divergence-free identities hold exactly; the penalty
    with its multiplier only matters in fixed-mesh mode.  With ``mesh``
    given (boundary vertices first, matching ``target.points``) only edge
    values are searched.  A least-squares polish at the final connectivity
    follows, and the best iterate is returned.  Edge values are kept within
    a factor ``q_range`` of the median initial value, which keeps the
    embedded mesh away from degenerate triangles.
    """
    rng = np.random.default_rng(seed)
    norm = ThresholdedNorm(target, threshold, low_weight)
    nb = target.n
    if mesh is None:
        if n_interior is None:
            n_interior = default_interior_count(nb)
        P = target.points
        c = P.mean(axis=0)
        rad = np.linalg.norm(P - c, axis=1).min() * np.cos(np.pi / nb)
        k = np.arange(n_interior)
        r = 0.7 * rad * np.sqrt((k + 0.5) / max(n_interior, 1))
        th = k * np.pi * (3 - np.sqrt(5)) + rng.uniform(0, 2 * np.pi)
        inner = c + np.column_stack([r * np.cos(th), r * np.sin(th)])
        mesh = delaunay(np.vstack([P, inner]))
        fixed_mesh = False
    else:
        if np.linalg.norm(mesh.vertices[:nb] - target.points) > 1e-9 * mesh.diameter():
            raise MeshMismatch("the first vertices of the mesh must be the boundary points")
        fixed_mesh = True
    # initial values: cotan weights, scaled to the target in closed form
    q0 = qh_from_q(mesh, 1.0, boundary=True).values
    q0 = np.maximum(q0, 0.05 * np.abs(q0).mean())
    state = _AnnealState(mesh.vertices.copy(), mesh.triangles.copy(),
                         {tuple(e): np.log(v) for e, v in zip(mesh.edges, q0)}, nb, fixed_mesh)
    _, _, Lam, _ = _evaluate(state, norm)
    cscale = float(np.sum(Lam * target.matrix) / np.sum(Lam * Lam))
    for e in state.z:
        state.z[e] += np.log(max(cscale, 1e-12))
    zc = float(np.median(list(state.z.values())))
    zlo, zhi = zc - np.log(q_range), zc + np.log(q_range)
    for e in state.z:
        state.z[e] = float(np.clip(state.z[e], zlo, zhi))
    f, div, _, _ = _evaluate(state, norm)
    lam = div_weight
    cur = (f + lam * div, f, div)
    best = (f + div_weight * div, state.copy(), f, div)
    history = [f]
    T = 0.1 * max(f, 1e-12)
    keys = None
    for _ in range(n_temps):
        for _ in range(moves):
            trial = state.copy()
            if fixed_mesh or rng.random() < 0.8:
                keys = list(trial.z)
                key = keys[rng.integers(len(keys))]
                trial.z[key] = float(np.clip(trial.z[key] + rng.normal(scale=0.3), zlo, zhi))
            elif not _flip(trial, rng):
                continue
            tf, tdiv, _, _ = _evaluate(trial, norm)
            if not np.isfinite(tf):
                continue
            val = tf + lam * tdiv
            if val <= cur[0] or rng.random() < np.exp(-(val - cur[0]) / T):
                state, cur = trial, (val, tf, tdiv)
                score = tf + div_weight * tdiv
                if score < best[0]:
                    best = (score, state.copy(), tf, tdiv)
        lam += div_weight * cur[2]  # multiplier ascent
        history.append(best[2])
        T *= cooling
    _, st, f, div = best
    edges = _tri_edges(st.tris)
    z = np.array([st.z[tuple(e)] for e in edges])
    if polish:
        def resid(zz):
            trial = st.copy()
            trial.z = {tuple(e): v for e, v in zip(edges, zz)}
            tf, tdiv, Lm, _ = _evaluate(trial, norm)
            if Lm is None:
                return np.full(nb * (nb + 1) // 2 + 2 * (len(st.pts) - nb), 1e3)
            W = norm.weighted(Lm) / norm.scale
            q = np.exp(zz)
            n = len(st.pts)
            L = np.zeros((n, n))
            np.add.at(L, (edges[:, 0], edges[:, 1]), -q)
            np.add.at(L, (edges[:, 1], edges[:, 0]), -q)
            np.add.at(L, (edges[:, 0], edges[:, 0]), q)
            np.add.at(L, (edges[:, 1], edges[:, 1]), q)
            r = np.zeros(2 * (n - nb))
            if fixed_mesh and n > nb:
                r = (L @ st.pts)[nb:].ravel() / (q.max() * np.ptp(st.pts[:nb], axis=0).max())
            return np.concatenate([W[np.triu_indices(nb)], np.sqrt(div_weight) * r])

        sol = least_squares(resid, np.clip(z, zlo + 1e-12, zhi - 1e-12), bounds=(zlo, zhi), method="trf", xtol=1e-15, ftol=1e-15, gtol=1e-15,
                            max_nfev=100 * len(z))
        trial = st.copy()
        trial.z = {tuple(e): v for e, v in zip(edges, sol.x)}
        pf, pdiv, _, _ = _evaluate(trial, norm)
        if pf + div_weight * pdiv <= f + div_weight * div:
            st, z, f, div = trial, sol.x, pf, pdiv
            history.append(f)
    _, _, _, pts = _evaluate(st, norm)
    mesh = Mesh2D(pts, st.tris)
    zmap = dict(zip(map(tuple, edges), z))
    qh = EdgeConductivities(mesh, np.exp([zmap[tuple(e)] for e in mesh.edges]))
    return CoarseFit(mesh, qh, f, div, history)


# ---------------------------------------------------------------------------
# harmonic-coordinate iteration


def _composed_gradients(coarse, fine, images):
    """Per fine triangle, gradients of phi_i o F for every coarse i:
    two sparse matrices (m_fine x n_coarse)."""
    Phi = composed_hats(coarse, images).tocsr()
    g = fine.gradients()  # (m, 3, 2)
    m = fine.n_triangles
    out = []
    for d in range(2):
        acc = sp.csr_matrix((m, coarse.n_vertices))
        for r in range(3):
            S = sp.csr_matrix((g[:, r, d], (np.arange(m), fine.triangles[:, r])),
                              shape=(m, fine.n_vertices))
            acc = acc + S @ Phi
        out.append(acc.tocsr())
    return out


def sigma_constraint_matrix(coarse, fine, F=None, edges=None):
    """Rows: coarse edges; columns: fine triangles.  Entry
    -|t| grad(phi_i o F) . grad(phi_j o F) on t, so that A sigma = q."""
    images = fine.vertices if F is None else F.images
    Gx, Gy = _composed_gradients(coarse, fine, images)
    if edges is None:
        edges = np.arange(coarse.n_edges)
    e = coarse.edges[edges]
    area = fine.areas()
    Gx, Gy = Gx.toarray(), Gy.toarray()
    A = -(Gx[:, e[:, 0]] * Gx[:, e[:, 1]] + Gy[:, e[:, 0]] * Gy[:, e[:, 1]]) * area[:, None]
    return A.T


def fine_tv_operator(fine):
    """Jump operator D (interior fine edges x triangles) and edge lengths."""
    ie = np.flatnonzero(fine.interior_edge & ~fine.ghost[fine.edges].any(axis=1))
    t = fine.edge_triangles[ie]
    n = len(ie)
    D = sp.csr_matrix((np.r_[np.ones(n), -np.ones(n)], (np.r_[np.arange(n), np.arange(n)],
                                                        np.r_[t[:, 0], t[:, 1]])),
                      shape=(n, fine.n_triangles))
    return D, fine.edge_lengths()[ie]


def tv_sigma_recovery(qh, fine, F=None, bounds=(1e-3, 1e3), elastic=False, penalty=1e3):
    """Piecewise-constant scalar sigma on ``fine`` of minimal total variation
    subject to the coarse edge constraints, as a linear program.

    ``elastic`` admits constraint violations at a cost of ``penalty`` per
    unit violation, both measured relative to the mean |q| and the cost
    scaled by the perimeter.  The returned
    SigmaField carries ``tv`` and ``violation`` (max relative) attributes.
    """
    coarse = qh.mesh
    ok = np.flatnonzero(np.isfinite(qh.values))
    q = qh.values[ok]
    A = sigma_constraint_matrix(coarse, fine, F, ok)
    sc = max(float(np.abs(q).mean()), 1e-300)  # common scale: violations relative to the mean q
    A = A / sc
    b = q / sc
    D, ell = fine_tv_operator(fine)
    m, ne, nc = fine.n_triangles, D.shape[0], len(q)
    perim = fine.edge_lengths()[fine.boundary_edge].sum()
    I = sp.identity(ne, format="csr")
    A_ub = sp.vstack([sp.hstack([D, -I]), sp.hstack([-D, -I])])
    b_ub = np.zeros(2 * ne)
    cost = np.r_[np.zeros(m), ell]
    bnds = [bounds] * m + [(0, None)] * ne
    A_eq = sp.hstack([sp.csr_matrix(A), sp.csr_matrix((nc, ne))])
    if elastic:
        Ie = sp.identity(nc, format="csr")
        A_eq = sp.hstack([A_eq, Ie, -Ie])
        A_ub = sp.hstack([A_ub, sp.csr_matrix((2 * ne, 2 * nc))])
        cost = np.r_[cost, np.full(2 * nc, penalty * perim)]
        bnds += [(0, None)] * (2 * nc)
    res = linprog(cost, A_ub=A_ub.tocsr(), b_ub=b_ub, A_eq=A_eq.tocsr(), b_eq=b, bounds=bnds,
                  method="highs")
    if res.status == 2 and not elastic:
        el = tv_sigma_recovery(qh, fine, F, bounds, elastic=True, penalty=1e6)
        k = int(np.argmax(el.residual))
        raise InfeasibleLP(f"edge constraints infeasible; worst edge {tuple(coarse.edges[ok[k]])} "
                           f"violated by {el.residual[k]:.3g} (relative)",
                           constraint=tuple(int(v) for v in coarse.edges[ok[k]]),
                           violation=float(el.residual[k]))
    if res.status != 0:
        raise InfeasibleLP(f"linear program failed: {res.message}")
    sig = res.x[:m]
    out = SigmaField.on_mesh(fine, sig)
    out.residual = np.abs(A @ sig - b)
    out.violation = float(out.residual.max()) if nc else 0.0
    out.tv = float(ell @ np.abs(D @ sig))
    return out


@dataclass
class ReconstructionReport:
    field: object
    misfit: list
    alphas: list = field(default_factory=list)
    wall_clock: float = 0.0
    status: str = "converged"
    extra: dict = field(default_factory=dict)

    @property
    def converged(self):
        return self.status == "converged"


def harmonic_iteration(fit, target: DtNMatrix, levels=2, n_iters=20, guard=3,
                       bounds=(1e-3, 1e3), penalty=1e3) -> ReconstructionReport:
    """Alternate the TV-minimal sigma on a refinement of the coarse mesh with
    the sigma-harmonic coordinates, starting from F = x.

    Stops after ``n_iters`` or once the data misfit has increased ``guard``
    times in a row or the coordinates fold (status ``"unstable"``); a
    stationary sigma ends the run
    with status ``"converged"``.  The best iterate is returned and
    ``misfit[0]`` is the coarse fit's own data misfit.
    """
    t0 = time.perf_counter()
    coarse, qh = fit.mesh, fit.qh
    fine, _ = refine(coarse, levels)
    points = target.points
    misfit = [dtn_misfit(discrete_dtn(qh, points), target)]
    F = None
    best, best_m, prev = None, np.inf, None
    ups, status = 0, "max_iter"
    sigmas, violations = [], []
    for k in range(n_iters):
        sig = tv_sigma_recovery(qh, fine, F, bounds=bounds, elastic=True, penalty=penalty)
        vals = sig.values[:, 0]
        lam = forward_dtn(vals, points, mesh=fine)
        m = dtn_misfit(lam, target)
        misfit.append(m)
        sigmas.append(vals)
        violations.append(sig.violation)
        if m < best_m:
            best, best_m = sig, m
        if prev is not None and np.abs(vals - prev).max() <= 1e-9 * np.abs(prev).max():
            status = "converged"
            break
        ups = ups + 1 if m > misfit[-2] and k > 0 else 0
        if ups >= guard:
            status = "unstable"
            break
        prev = vals
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            F = harmonic_coordinates(fine, vals, on_noninjective="warn")
        if not F.injective:  # folded coordinates: the iteration has broken down
            status = "unstable"
            break
    return ReconstructionReport(best, misfit, wall_clock=time.perf_counter() - t0, status=status,
                                extra={"fine_mesh": fine, "sigmas": sigmas, "violations": violations})


# ---------------------------------------------------------------------------
# quadratic stencil


class QuadraticStencil:
    """Per physical triangle, the linear map from the six stencil s values
    (the triangle and the far vertices of its three neighbours) to the packed
    Q^h = R Hess R^T of the interpolating quadratic."""

    def __init__(self, mesh, cond_max=1e12):
        phys_t = np.flatnonzero(~mesh.ghost[mesh.triangles].any(axis=1))
        te = mesh.triangle_edges[phys_t]  # (m, 3)
        et = mesh.edge_triangles[te]  # (m, 3, 2)
        eo = mesh.edge_opposite[te]
        own = (et == phys_t[:, None, None])
        if np.any(~own.any(axis=2)) or np.any((et < 0).any(axis=2)):
            raise IncompleteHinge("every triangle needs three neighbours; add a ghost layer")
        far = np.where(own[:, :, 0], eo[:, :, 1], eo[:, :, 0])
        idx = np.concatenate([mesh.triangles[phys_t], far], axis=1)  # (m, 6)
        p = mesh.vertices[idx]
        c = p[:, :3].mean(axis=1, keepdims=True)
        hsc = np.linalg.norm(p - c, axis=2).max(axis=1)[:, None, None]
        x = (p - c) / hsc
        V = np.stack([np.ones_like(x[..., 0]), x[..., 0], x[..., 1],
                      x[..., 0] ** 2, x[..., 0] * x[..., 1], x[..., 1] ** 2], axis=2)
        cond = np.linalg.cond(V)
        bad = np.flatnonzero(~(cond < cond_max))
        if len(bad):
            raise SingularStencil(f"{len(bad)} quadratic stencils are degenerate (triangle {phys_t[bad[0]]})")
        Vi = np.linalg.inv(V)  # coefficients = Vi @ s
        h2 = hsc[:, 0, 0] ** 2
        hxx = 2 * Vi[:, 3] / h2[:, None]
        hxy = Vi[:, 4] / h2[:, None]
        hyy = 2 * Vi[:, 5] / h2[:, None]
        self.coef = np.stack([hyy, -hxy, hxx], axis=1)  # R Hess R^T, (m, 3, 6)
        self.index = idx
        self.triangles = phys_t
        self.mesh = mesh

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        return np.einsum("mcr,mr->mc", self.coef, s[self.index])

    def trace_matrix(self):
        """Sparse map s -> tr Q^h per physical triangle."""
        m = len(self.triangles)
        w = self.coef[:, 0] + self.coef[:, 2]
        return sp.csr_matrix((w.ravel(), (np.repeat(np.arange(m), 6), self.index.ravel())),
                             shape=(m, self.mesh.n_vertices))


_STENCILS = {}


def quadratic_stencil_q(mesh, sh):
    """Per physical triangle packed Q^h from the six-point quadratic fit."""
    key = mesh.hash()
    st = _STENCILS.get(key)
    if st is None:
        st = _STENCILS.setdefault(key, QuadraticStencil(mesh))
    return st(sh)


def anisotropy(qpacked):
    """(strength |l_max - l_min| / tr Q, orientation of the major axis in [0, pi))."""
    q = np.atleast_2d(qpacked)
    ev = eigvals_packed(q)
    tr = q[:, 0] + q[:, 2]
    strength = np.abs(ev[:, 1] - ev[:, 0]) / tr
    ang = 0.5 * np.arctan2(2 * q[:, 1], q[:, 0] - q[:, 2])
    return strength, np.mod(ang, np.pi)


# ---------------------------------------------------------------------------
# divergence-free parameterization recovery


class ShProblem:
    """Data misfit, TV of tr Q^h and log barrier for s^h on a ghosted mesh."""

    def __init__(self, target, mesh, alpha=0.0, pairs=None, eps_rel=1e-6):
        if not mesh.ghost.any():
            mesh = add_ghost_layer(mesh)
        self.mesh = mesh
        self.target = target
        self.alpha = float(alpha)
        phys = np.flatnonzero(~mesh.ghost[mesh.edges].any(axis=1))
        self.edge_ids = phys
        self.H, _ = hinge_matrix(mesh, phys)
        self.net = Network(mesh, mesh.edges[phys], _boundary_order(mesh, target.points))
        self.G = np.eye(target.n) if pairs is None else np.asarray(pairs, dtype=float)
        self.Fdata = target.matrix @ self.G
        self.w = target.boundary_weights()
        self.sw = np.sqrt(self.w)
        self.stencil = QuadraticStencil(mesh)
        Dt = self._triangle_jumps()
        self.TV = (Dt @ self.stencil.trace_matrix()).tocsr()
        self.eps_rel = eps_rel
        self.eps = None

    def _triangle_jumps(self):
        mesh = self.mesh
        pos = np.full(mesh.n_triangles, -1)
        pos[self.stencil.triangles] = np.arange(len(self.stencil.triangles))
        et = mesh.edge_triangles
        ok = (et >= 0).all(axis=1)
        ok[ok] &= (pos[et[ok]] >= 0).all(axis=1)
        ie = np.flatnonzero(ok)
        a, b = pos[et[ie, 0]], pos[et[ie, 1]]
        n = len(ie)
        self.tv_len = mesh.edge_lengths()[ie]
        return sp.csr_matrix((np.r_[np.ones(n), -np.ones(n)],
                              (np.r_[np.arange(n), np.arange(n)], np.r_[a, b])),
                             shape=(n, len(self.stencil.triangles)))

    def q(self, s):
        return self.H @ s

    def residual(self, s, q=None):
        q = self.q(s) if q is None else q
        U, Lam = self.net.extension(q)
        R = self.sw[:, None] * (Lam @ self.G - self.Fdata)
        return R, U, Lam

    def misfit(self, s):
        R, _, _ = self.residual(s)
        return 0.5 * float(np.sum(R * R))

    def misfit_gradient(self, s):
        """Adjoint gradient: one harmonic extension of the weighted residual
        per data pair."""
        q = self.q(s)
        R, U, Lam = self.residual(s, q)
        DU = self.net.D @ U  # edges x nb
        Du = DU @ self.G  # primal differences per pair
        Dv = DU @ (self.sw[:, None] * R)  # adjoint differences per pair
        gq = np.sum(Du * Dv, axis=1)
        return 0.5 * float(np.sum(R * R)), self.H.T @ gq

    def residual_jacobian(self, s, q=None):
        """Jacobian of vec(R) with respect to s (Gauss-Newton)."""
        q = self.q(s) if q is None else q
        R, U, Lam = self.residual(s, q)
        DU = self.net.D @ U
        Du = DU @ self.G
        Jq = np.einsum("a,ea,ek->ake", self.sw, DU, Du).reshape(-1, len(q))
        return R.ravel(), np.asarray((self.H.T @ Jq.T).T), q

    def tv_terms(self, s):
        j = self.TV @ s
        e = self.eps
        r = np.sqrt(j * j + e * e)
        val = float(self.tv_len @ r)
        grad = self.TV.T @ (self.tv_len * j / r)
        curv = self.tv_len * e * e / r ** 3
        return val, grad, curv


def _initial_s(problem, s0):
    mesh = problem.mesh
    v = mesh.vertices
    if s0 is not None:
        s0 = np.asarray(s0, dtype=float)
        if np.all(problem.q(s0) > 0):
            return s0, False
        warnings.warn("initial s is not strictly hinge-convex; using the paraboloid", RuntimeWarning)
    par = 0.5 * (v ** 2).sum(axis=1)
    q1 = problem.q(par)
    # a ghost value enters only its own boundary edge: set it so the edge
    # carries the one-sided cotan weight (exact for linear data), floored
    # to stay strictly positive on obtuse boundary triangles
    H = problem.H.tocsc()
    floor = 0.1 * float(np.median(np.abs(q1)))
    for g in np.flatnonzero(mesh.ghost):
        col = H[:, g]
        if col.nnz != 1:
            continue
        e = col.indices[0]
        i, j = mesh.edges[problem.edge_ids[e]]
        opp = mesh.edge_opposite[problem.edge_ids[e]]
        k = opp[opp != g][0]
        a, b = v[i] - v[k], v[j] - v[k]
        half = 0.5 * (a @ b) / abs(a[0] * b[1] - a[1] * b[0])
        par[g] += (max(half, floor) - q1[e]) / col.data[0]
    q1 = problem.q(par)
    if np.any(q1 <= 0):
        raise InfeasibleStart("the paraboloid is not hinge-convex on this mesh (non-Delaunay mesh?)")
    # closed-form scale minimising the weighted data misfit
    A = problem.sw[:, None] * (problem.net.dtn(q1) @ problem.G)
    B = problem.sw[:, None] * problem.Fdata
    c = float(np.sum(A * B) / np.sum(A * A))
    return max(c, 1e-12) * par, s0 is not None


def recover_sh(target: DtNMatrix, mesh, alpha=0.0, pairs=None, s0=None, pins=None, mu0=None,
               mu_factor=0.1, mu_min=1e-14, max_iter=300, tol=1e-14,
               eps_rel=1e-6) -> ReconstructionReport:
    """Recover s^h on ``mesh`` (ghost layer added if missing) from DtN data.

    Minimises 1/2 sum_k |Lambda(s) g_k - f_k|^2 (trapezoidal boundary weights)
    + alpha TV(tr Q^h) subject to q^h > 0, by a damped Gauss-Newton method on
    a log-barrier with decreasing weight.  Three s values are pinned.
    """
    t0 = time.perf_counter()
    pb = ShProblem(target, mesh, alpha, pairs, eps_rel)
    mesh = pb.mesh
    s, fallback = _initial_s(pb, s0)
    n = mesh.n_vertices
    pins = mesh.triangles[0] if pins is None else np.asarray(pins)
    free = np.setdiff1d(np.arange(n), pins)
    trq = pb.stencil.trace_matrix() @ s
    pb.eps = eps_rel * max(float(np.abs(trq).mean()), 1e-300)
    Hf = pb.H[:, free].toarray()
    J0 = pb.misfit(s)
    mu = (1e-3 * J0 / len(pb.edge_ids)) if mu0 is None else mu0

    def total(s, mu):
        q = pb.q(s)
        if np.any(q <= 0):
            return np.inf
        R, _, _ = pb.residual(s, q)
        val = 0.5 * float(np.sum(R * R)) - mu * float(np.sum(np.log(q)))
        if pb.alpha:
            val += pb.alpha * pb.tv_terms(s)[0]
        return val

    history = [pb.misfit(s)]
    status = "converged"
    lm = 1e-3
    it_total = 0
    while True:
        cur = total(s, mu)
        for _ in range(max_iter):
            it_total += 1
            r, J, q = pb.residual_jacobian(s)
            Jf = J[:, free]
            g = Jf.T @ r - mu * (Hf.T @ (1.0 / q))
            B = Jf.T @ Jf + mu * (Hf.T * (1.0 / q ** 2)) @ Hf
            if pb.alpha:
                _, tg, tc = pb.tv_terms(s)
                Tf = pb.TV[:, free]
                g = g + pb.alpha * tg[free]
                B = B + pb.alpha * (Tf.T @ sp.diags(tc) @ Tf).toarray()
            dB = np.diag(B).copy()
            accepted = False
            for _ in range(30):
                try:
                    d = -np.linalg.solve(B + lm * (np.diag(dB) + 1e-12 * dB.max() * np.eye(len(dB))), g)
                except np.linalg.LinAlgError:
                    lm *= 10
                    continue
                hd = Hf @ d
                neg = hd < 0
                tmax = 0.99 * np.min(q[neg] / -hd[neg]) if neg.any() else np.inf
                step = min(1.0, tmax)
                trial = s.copy()
                trial[free] += step * d
                val = total(trial, mu)
                if val < cur:
                    accepted = True
                    break
                lm *= 4
            if not accepted:
                break
            dec = cur - val
            s, cur = trial, val
            lm = max(lm / 3, 1e-15)
            history.append(pb.misfit(s))
            if dec <= tol * max(abs(cur), 1e-300) or abs(g @ d) <= tol * max(abs(cur), 1e-300):
                break
        else:
            status = "max_iter"
        if mu <= mu_min:
            break
        mu = max(mu * mu_factor, mu_min)
    if status != "converged":
        warnings.warn("recover_sh reached the iteration limit", NonConvergenceWarning)
    q = pb.q(s)
    Q = pb.stencil(s)
    qh_vals = np.full(mesh.n_edges, np.nan)
    qh_vals[pb.edge_ids] = q
    return ReconstructionReport(
        field=s, misfit=history, alphas=[alpha], wall_clock=time.perf_counter() - t0, status=status,
        extra={"mesh": mesh, "qh": EdgeConductivities(mesh, qh_vals), "Q": Q,
               "Q_triangles": pb.stencil.triangles, "fallback_start": fallback,
               "tv": pb.tv_terms(s)[0], "iterations": it_total,
               "dtn": DtNMatrix(pb.net.dtn(q), target.points, "discrete")})


def lcurve(target, mesh, alphas=10.0 ** np.arange(-4, 1), **kw):
    """Sweep alpha; returns rows (alpha, misfit, TV) and the alpha at the
    point of maximal curvature of the log-log curve."""
    rows = []
    for a in alphas:
        rep = recover_sh(target, mesh, alpha=a, **kw)
        rows.append((float(a), rep.misfit[-1], rep.extra["tv"]))
    r = np.array(rows)
    if len(r) < 3:
        return rows, float(r[0, 0])
    x, y = np.log(np.maximum(r[:, 1], 1e-300)), np.log(np.maximum(r[:, 2], 1e-300))
    dx, dy = np.gradient(x), np.gradient(y)
    ddx, ddy = np.gradient(dx), np.gradient(dy)
    kappa = np.abs(dx * ddy - dy * ddx) / np.maximum((dx * dx + dy * dy) ** 1.5, 1e-300)
    return rows, float(r[int(np.argmax(kappa)), 0])


def fourier_pairs(points, kmax):
    """Dirichlet data cos(k theta), sin(k theta) for k = 1..kmax at the
    boundary points, theta the angle about their centroid (columns)."""
    P = np.asarray(points, dtype=float)
    if kmax < 1:
        raise ValidationError("kmax must be at least 1")
    d = P - P.mean(axis=0)
    th = np.arctan2(d[:, 1], d[:, 0])
    return np.column_stack([f(k * th) for k in range(1, kmax + 1) for f in (np.cos, np.sin)])


def sqrt_det(qpacked):
    q = np.atleast_2d(qpacked)
    return np.sqrt(np.maximum(q[:, 0] * q[:, 2] - q[:, 1] ** 2, 0.0))


def recovered_q(report):
    """(physical mesh, packed Q^h per triangle) from a recover_sh report."""
    return report.extra["mesh"].physical(), report.extra["Q"]
