"""Q-optimal meshes: alternate weighted-Delaunay reconnection with the
critical-point relocation of interior points."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull

from .errors import NonConvergenceWarning, SingularHessian, ValidationError
from .fem import assemble
from .fields import SField, s_to_q, to_matrix
from .mesh import Mesh2D, WeightedPointSet, weighted_delaunay

# 7-point degree-5 rule on the reference triangle (barycentric, weights sum to 1)
_A1, _B1 = 0.0597158717897698, 0.4701420641051151
_A2, _B2 = 0.7974269853530873, 0.1012865073234563
_W0, _W1, _W2 = 0.225, 0.1323941527885062, 0.1259391805448271
QUAD7_BARY = np.array([
    [1 / 3, 1 / 3, 1 / 3],
    [_A1, _B1, _B1], [_B1, _A1, _B1], [_B1, _B1, _A1],
    [_A2, _B2, _B2], [_B2, _A2, _B2], [_B2, _B2, _A2],
])
QUAD7_W = np.array([_W0, _W1, _W1, _W1, _W2, _W2, _W2])


def _quad_points(mesh):
    p = mesh.vertices[mesh.triangles]
    return np.einsum("qr,mrd->mqd", QUAD7_BARY, p)  # (m, 7, 2)


def interpolation_energy(mesh, s):
    """E_s = int (s^h - s) with s^h the PL interpolant (>= 0 for convex s)."""
    q = _quad_points(mesh)
    sv = s.values(mesh.vertices)
    sh = np.einsum("qr,mr->mq", QUAD7_BARY, sv[mesh.triangles])
    ex = s.values(q.reshape(-1, 2)).reshape(q.shape[:2])
    return float(((sh - ex) @ QUAD7_W) @ mesh.areas())


def interpolation_errors(mesh, s, condition=True):
    """(L2 error, H1 seminorm error, kappa_2) of the PL interpolant of s.

    kappa_2 is the spectral condition number of the interior stiffness
    matrix assembled with Q = R Hess(s) R^T (dense eigenvalues).
    """
    q = _quad_points(mesh)
    a = mesh.areas()
    sv = s.values(mesh.vertices)
    sh = np.einsum("qr,mr->mq", QUAD7_BARY, sv[mesh.triangles])
    ex = s.values(q.reshape(-1, 2)).reshape(q.shape[:2])
    l2 = np.sqrt(((sh - ex) ** 2 @ QUAD7_W) @ a)
    gh = np.einsum("mr,mrd->md", sv[mesh.triangles], mesh.gradients())
    gx = s.gradient(q.reshape(-1, 2)).reshape(q.shape[0], 7, 2)
    h1 = np.sqrt((((gx - gh[:, None, :]) ** 2).sum(axis=2) @ QUAD7_W) @ a)
    kappa = np.nan
    if condition:
        K = assemble(mesh, s_to_q(s))
        iv = np.flatnonzero(mesh.interior_vertex)
        if len(iv):
            ev = np.linalg.eigvalsh(K[iv][:, iv].toarray())
            kappa = float(ev[-1] / ev[0])
    return float(l2), float(h1), kappa


@dataclass
class MeshOptState:
    points: np.ndarray
    mesh: Mesh2D
    s: SField
    fixed: np.ndarray  # boolean per point
    iteration: int = 0
    energy: list = field(default_factory=list)
    step: list = field(default_factory=list)
    skipped: int = 0


def _triangulate(points, s):
    res = weighted_delaunay(WeightedPointSet.from_heights(points, s.values(points)))
    if len(res.hidden):
        raise ValidationError(f"{len(res.hidden)} points hidden; s is not convex on the point set")
    return res.mesh


def relocate_points(state, fan_measure="area", cond_max=1e12):
    """Target positions from the critical point of E_s for the current mesh.

    For interior point i with fan K_i, solves
    Hess s(x_i) x* = Hess s(x_i) x_i - (1/|K_i|) sum_j grad|t_j| sum_{k in t_j} s(x_k - x_i).
    ``fan_measure`` selects |K_i| as the fan area or the fan cardinality.
    Fixed points and points with an ill-conditioned Hessian keep their
    position; the latter are counted in ``state.skipped``.
    """
    mesh, s = state.mesh, state.s
    v = mesh.vertices
    t = mesh.triangles
    n = mesh.n_vertices
    rhs = np.zeros((n, 2))
    fan = np.zeros(n)
    area = mesh.areas()
    for r in range(3):
        i = t[:, r]
        a = t[:, (r + 1) % 3]
        b = t[:, (r + 2) % 3]
        # gradient of the area with respect to the position of vertex i
        grad = 0.5 * np.column_stack([v[a, 1] - v[b, 1], v[b, 0] - v[a, 0]])
        ssum = (s.values(v[i] - v[i]) + s.values(v[a] - v[i]) + s.values(v[b] - v[i]))
        np.add.at(rhs, i, grad * ssum[:, None])
        np.add.at(fan, i, area if fan_measure == "area" else 1.0)
    if fan_measure not in ("area", "count"):
        raise ValidationError(f"unknown fan measure {fan_measure!r}")
    move = ~state.fixed
    H = to_matrix(s.hessian(v[move]))
    cond = np.linalg.cond(H)
    good = cond < cond_max
    if not np.all(good):
        state.skipped += int((~good).sum())
        warnings.warn(f"{int((~good).sum())} points skipped: singular Hessian", RuntimeWarning)
    idx = np.flatnonzero(move)[good]
    d = -rhs[idx] / fan[idx, None]
    new = v.copy()
    new[idx] = v[idx] + np.linalg.solve(H[good], d[..., None])[..., 0]
    if not np.any(good) and np.any(move):
        raise SingularHessian("Hessian singular at every movable point")
    return new


def _inside(points, hull_eq, tol):
    return np.all(points @ hull_eq[:, :2].T + hull_eq[:, 2] <= tol, axis=1)


def _limit_to_domain(points, delta, hull_eq, frac=0.9):
    """Shorten each displacement to stay within ``frac`` of the distance to the hull."""
    slack = -(points @ hull_eq[:, :2].T + hull_eq[:, 2])  # >= 0 inside
    rate = delta @ hull_eq[:, :2].T
    with np.errstate(divide="ignore", invalid="ignore"):
        tmax = np.where(rate > 0, frac * np.maximum(slack, 0.0) / rate, np.inf)
    scale = np.minimum(1.0, tmax.min(axis=1))
    return delta * scale[:, None]


def optimize_mesh(points, s, max_iter=200, tol=1e-4, fixed=None, fan_measure="area",
                  beta=0.5, halvings=4):
    """Q-optimal mesh by alternating reconnection and relocation.

    ``fixed`` marks immovable points; by default the points on the convex
    hull boundary.  Each displacement is first shortened to keep the point
    inside the domain; the step is then damped by ``beta`` up to
    ``halvings`` times while E_s would increase.  If no damped step is
    acceptable the iteration stops.  Returns ``(mesh, state)``.
    """
    pts = np.array(points, dtype=float)
    mesh = _triangulate(pts, s)
    if len(mesh.vertices) != len(pts):
        raise ValidationError("duplicate or hidden points")
    if fixed is None:
        fixed = mesh.boundary_vertex.copy()
    fixed = np.asarray(fixed, dtype=bool)
    hull = ConvexHull(pts[fixed] if fixed.sum() >= 3 else pts)
    diam = mesh.diameter()
    state = MeshOptState(pts, mesh, s, fixed)
    e = interpolation_energy(mesh, s)
    state.energy.append(e)
    converged = False
    for it in range(max_iter):
        target = relocate_points(state, fan_measure)
        delta = _limit_to_domain(state.points, target - state.points, hull.equations)
        step = 1.0
        accepted = False
        for _ in range(halvings + 1):
            trial = state.points + step * delta
            if _inside(trial, hull.equations, 1e-12 * diam).all():
                try:
                    tm = _triangulate(trial, s)
                    te = interpolation_energy(tm, s)
                except ValidationError:
                    te = np.inf
                if te <= e * (1 + 1e-12) and tm.n_vertices == len(trial):
                    accepted = True
                    break
            step *= beta
        state.iteration = it + 1
        if not accepted:
            converged = True
            break
        disp = float(np.abs(step * delta).max())
        state.points, state.mesh, e = trial, tm, te
        state.energy.append(e)
        state.step.append(disp)
        if disp < tol * diam:
            converged = True
            break
    if not converged:
        warnings.warn(f"mesh optimisation stopped after {max_iter} iterations", NonConvergenceWarning)
    state.converged = converged
    return state.mesh, state


# ---------------------------------------------------------------------------
# point generators

def rectangle_boundary(spacing_x, spacing_y, x0=0.0, y0=0.0, x1=1.0, y1=1.0):
    """Boundary points of a rectangle with given target spacings along x and y."""
    nx = max(1, int(round((x1 - x0) / spacing_x)))
    ny = max(1, int(round((y1 - y0) / spacing_y)))
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    pts = [np.column_stack([xs, np.full_like(xs, y0)]),
           np.column_stack([np.full(ny - 1, x1), ys[1:-1]]),
           np.column_stack([xs[::-1], np.full_like(xs, y1)]),
           np.column_stack([np.full(ny - 1, x0), ys[-2:0:-1]])]
    return np.vstack(pts)


def initial_points(n_total, boundary, rng, margin=1e-3):
    """Boundary points plus uniform random interior points, ``n_total`` in all."""
    lo = boundary.min(axis=0)
    hi = boundary.max(axis=0)
    k = n_total - len(boundary)
    if k < 1:
        raise ValidationError("not enough points for an interior")
    span = hi - lo
    inner = lo + margin * span + rng.random((k, 2)) * span * (1 - 2 * margin)
    return np.vstack([boundary, inner])


def metric_points(n_total, hess, rng, domain=(0.0, 0.0, 1.0, 1.0)):
    """Initial points for a constant metric ``hess``: boundary spacing
    proportional to 1/sqrt of the Hessian diagonal, matched total count."""
    x0, y0, x1, y1 = domain
    hx, hy = float(hess[0][0]), float(hess[1][1])
    area = (x1 - x0) * (y1 - y0)
    # metric-equilateral spacing for n_total points
    delta = np.sqrt(2.0 * area * np.sqrt(hx * hy) / (np.sqrt(3.0) * n_total))
    bnd = rectangle_boundary(delta / np.sqrt(hx), delta / np.sqrt(hy), x0, y0, x1, y1)
    return initial_points(n_total, bnd, rng)


def edge_angles(mesh):
    """Orientation of every edge in [0, pi)."""
    d = mesh.vertices[mesh.edges[:, 1]] - mesh.vertices[mesh.edges[:, 0]]
    return np.mod(np.arctan2(d[:, 1], d[:, 0]), np.pi)
