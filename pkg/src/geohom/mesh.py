"""Triangulations, hinge geometry, weighted Delaunay, refinement, ghosts."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
from scipy.spatial import ConvexHull, Delaunay, QhullError

from .errors import (BoundaryEdge, CollinearInput, DegenerateTriangle,
                     DuplicateTriangle, NonManifoldEdge, ValidationError)
from .predicates import lifted_orient, orient2d


def _readonly(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


class Mesh2D:
    """Immutable triangle mesh with full edge/triangle incidence.

    ``edges`` holds sorted vertex pairs.  ``edge_triangles[e, 0]`` is the
    triangle containing the directed edge ``i -> j`` (``i < j``) and
    ``edge_triangles[e, 1]`` the one containing ``j -> i``; ``-1`` marks a
    missing side.  ``edge_opposite`` holds the matching opposite vertices.
    """

    def __init__(self, vertices, triangles, ghost=None):
        v = np.array(vertices, dtype=float).reshape(-1, 2)
        t = np.array(triangles, dtype=np.int64).reshape(-1, 3)
        n = len(v)
        if len(t) == 0:
            raise ValidationError("mesh has no triangles")
        if not np.all(np.isfinite(v)):
            raise ValidationError("non-finite vertex coordinates")
        if t.min() < 0 or t.max() >= n:
            raise ValidationError("triangle index out of range")
        used = np.zeros(n, dtype=bool)
        used[t.ravel()] = True
        if not used.all():
            raise ValidationError(f"unreferenced vertices: {np.flatnonzero(~used)[:10].tolist()}")
        if np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
            raise DegenerateTriangle("triangle with a repeated vertex")
        key = np.sort(t, axis=1)
        _, first, counts = np.unique(key, axis=0, return_index=True, return_counts=True)
        if np.any(counts > 1):
            raise DuplicateTriangle(f"duplicate triangle {key[first[counts > 1][0]].tolist()}")
        signs = orient2d(v[t[:, 0]], v[t[:, 1]], v[t[:, 2]])
        if np.any(signs <= 0):
            bad = int(np.flatnonzero(signs <= 0)[0])
            raise DegenerateTriangle(f"triangle {bad} {t[bad].tolist()} has non-positive area")

        # directed half-edges: local edge r runs t[r] -> t[r+1]; opposite vertex t[r+2]
        src = t[:, [0, 1, 2]].ravel()
        dst = t[:, [1, 2, 0]].ravel()
        opp = t[:, [2, 0, 1]].ravel()
        tri = np.repeat(np.arange(len(t)), 3)
        lo = np.minimum(src, dst)
        hi = np.maximum(src, dst)
        forward = src < dst
        pair = lo * n + hi
        uniq, inv, cnt = np.unique(pair, return_inverse=True, return_counts=True)
        if np.any(cnt > 2):
            e = uniq[cnt > 2][0]
            raise NonManifoldEdge(f"edge ({e // n}, {e % n}) has more than two triangles")
        E = len(uniq)
        slot = np.where(forward, 0, 1)
        flat = inv * 2 + slot
        if len(np.unique(flat)) != len(flat):
            raise NonManifoldEdge("edge used twice with the same orientation (folded mesh)")
        et = np.full(2 * E, -1, dtype=np.int64)
        eo = np.full(2 * E, -1, dtype=np.int64)
        et[flat] = tri
        eo[flat] = opp
        edges = np.stack([uniq // n, uniq % n], axis=1)
        tri_edges = inv.reshape(-1, 3)  # local edge r = (t[r], t[r+1])

        self.vertices = _readonly(v)
        self.triangles = _readonly(t)
        self.edges = _readonly(edges)
        self.edge_triangles = _readonly(et.reshape(E, 2))
        self.edge_opposite = _readonly(eo.reshape(E, 2))
        self.triangle_edges = _readonly(tri_edges)
        self.boundary_edge = _readonly((self.edge_triangles < 0).any(axis=1))
        bv = np.zeros(n, dtype=bool)
        bv[edges[self.boundary_edge].ravel()] = True
        self.boundary_vertex = _readonly(bv)
        g = np.zeros(n, dtype=bool) if ghost is None else np.asarray(ghost, dtype=bool).copy()
        if g.shape != (n,):
            raise ValidationError("ghost flag array has the wrong length")
        self.ghost = _readonly(g)
        self._edge_index = None

    # -- sizes -------------------------------------------------------------
    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    @property
    def n_edges(self):
        return len(self.edges)

    @property
    def interior_edge(self):
        return ~self.boundary_edge

    @property
    def interior_vertex(self):
        return ~self.boundary_vertex

    def euler_defect(self):
        """E - (2V + V_I - 3); zero for a triangulated topological disk."""
        vi = int(self.interior_vertex.sum())
        return self.n_edges - (2 * self.n_vertices + vi - 3)

    # -- geometry ------------------------------------------------------------
    def areas(self):
        # extended precision: the cross product cancels badly on slivers
        p = self.vertices[self.triangles].astype(np.longdouble)
        u = p[:, 1] - p[:, 0]
        w = p[:, 2] - p[:, 0]
        return (0.5 * (u[:, 0] * w[:, 1] - u[:, 1] * w[:, 0])).astype(float)

    def centroids(self):
        return self.vertices[self.triangles].mean(axis=1)

    def edge_lengths(self):
        d = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    def gradients(self):
        """Constant gradients of the three hat functions on every triangle, (m, 3, 2)."""
        p = self.vertices[self.triangles]
        area2 = 2.0 * self.areas()
        g = np.empty((self.n_triangles, 3, 2))
        for r in range(3):
            a = p[:, (r + 1) % 3]
            b = p[:, (r + 2) % 3]
            # rotate the opposite edge by -90 degrees
            g[:, r, 0] = (a[:, 1] - b[:, 1]) / area2
            g[:, r, 1] = (b[:, 0] - a[:, 0]) / area2
        return g

    def diameter(self):
        v = self.vertices
        return float(np.hypot(*(v.max(axis=0) - v.min(axis=0))))

    def h(self):
        return float(self.edge_lengths().max())

    def edge_index(self, i, j):
        if self._edge_index is None:
            self._edge_index = {(int(a), int(b)): e for e, (a, b) in enumerate(self.edges)}
        a, b = (int(i), int(j)) if i < j else (int(j), int(i))
        try:
            return self._edge_index[(a, b)]
        except KeyError:
            raise ValidationError(f"({i}, {j}) is not an edge") from None

    def vertex_neighbors(self):
        """CSR adjacency (indptr, indices) over all edges."""
        n = self.n_vertices
        rows = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
        cols = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
        a = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        a.sort_indices()
        return a.indptr, a.indices

    def boundary_loop(self):
        """Boundary vertices in counter-clockwise order (single loop)."""
        be = np.flatnonzero(self.boundary_edge)
        nxt = {}
        for e in be:
            i, j = self.edges[e]
            # the present triangle side gives the CCW direction
            if self.edge_triangles[e, 0] >= 0:
                nxt[int(i)] = int(j)
            else:
                nxt[int(j)] = int(i)
        if len(nxt) != len(be):
            raise ValidationError("boundary is not a simple closed polygon")
        start = min(nxt)
        loop = [start]
        while True:
            v = nxt[loop[-1]]
            if v == start:
                break
            loop.append(v)
            if len(loop) > len(be):
                raise ValidationError("boundary is not a simple closed polygon")
        if len(loop) != len(be):
            raise ValidationError("boundary has more than one component")
        return np.array(loop)

    def with_vertices(self, vertices):
        return Mesh2D(vertices, self.triangles, self.ghost)

    def physical(self):
        """Drop ghost vertices and ghost triangles."""
        if not self.ghost.any():
            return self
        keep_t = ~self.ghost[self.triangles].any(axis=1)
        keep_v = ~self.ghost
        remap = np.cumsum(keep_v) - 1
        return Mesh2D(self.vertices[keep_v], remap[self.triangles[keep_t]])

    def hash(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.vertices).tobytes())
        h.update(np.ascontiguousarray(self.triangles).tobytes())
        h.update(np.ascontiguousarray(self.ghost).tobytes())
        return h.hexdigest()[:16]

    def __repr__(self):
        return (f"Mesh2D(V={self.n_vertices}, T={self.n_triangles}, E={self.n_edges}, "
                f"ghosts={int(self.ghost.sum())})")

    # -- io ----------------------------------------------------------------
    def to_json(self, meta=None):
        d = {"vertices": self.vertices.tolist(), "triangles": self.triangles.tolist(),
             "ghost": np.flatnonzero(self.ghost).tolist()}
        if meta:
            d = {"meta": meta, **d}
        return json.dumps(d)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        try:
            v, t = d["vertices"], d["triangles"]
        except (KeyError, TypeError):
            raise ValidationError("mesh JSON needs 'vertices' and 'triangles'") from None
        g = np.zeros(len(v), dtype=bool)
        gi = d.get("ghost", [])
        if gi:
            g[np.asarray(gi, dtype=int)] = True
        return cls(v, t, g)


def build_mesh(vertices, triangles, ghost=None):
    """Validate and build a :class:`Mesh2D`."""
    return Mesh2D(vertices, triangles, ghost)


def load_mesh(path):
    with open(path) as f:
        return Mesh2D.from_json(f.read())


def save_mesh(mesh, path, meta=None):
    with open(path, "w") as f:
        f.write(mesh.to_json(meta))


# ---------------------------------------------------------------------------
# hinges

@dataclass(frozen=True)
class HingeGeometry:
    i: int
    j: int
    k: int
    l: int
    cot_ijk: float  # angle at j in triangle ijk
    cot_ijl: float  # angle at j in triangle ijl
    cot_jik: float  # angle at i in triangle ijk
    cot_jil: float  # angle at i in triangle ijl
    area_ijk: float
    area_ijl: float
    length: float


def _cot(p, a, b):
    """cot of the angle at p between rays p->a and p->b (arrays (n, 2))."""
    p, a, b = (np.asarray(z, dtype=np.longdouble) for z in (p, a, b))
    u = a - p
    w = b - p
    dot = u[:, 0] * w[:, 0] + u[:, 1] * w[:, 1]
    cross = np.abs(u[:, 0] * w[:, 1] - u[:, 1] * w[:, 0])
    return (dot / cross).astype(float)


def hinge_arrays(mesh, edges=None):
    """Vectorised hinge geometry over interior edges (or the given edge ids)."""
    if edges is None:
        edges = np.flatnonzero(mesh.interior_edge)
    edges = np.asarray(edges, dtype=np.int64)
    if np.any(mesh.boundary_edge[edges]):
        raise BoundaryEdge("hinge requested on a boundary edge")
    v = mesh.vertices
    i, j = mesh.edges[edges, 0], mesh.edges[edges, 1]
    k, l = mesh.edge_opposite[edges, 0], mesh.edge_opposite[edges, 1]
    pi, pj, pk, pl = v[i], v[j], v[k], v[l]

    def area(a, b, c):
        a, b, c = (z.astype(np.longdouble) for z in (a, b, c))
        return (0.5 * np.abs((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
                             - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))).astype(float)

    d = pj - pi
    return dict(
        edge=edges, i=i, j=j, k=k, l=l,
        cot_ijk=_cot(pj, pi, pk), cot_ijl=_cot(pj, pi, pl),
        cot_jik=_cot(pi, pj, pk), cot_jil=_cot(pi, pj, pl),
        cot_k=_cot(pk, pi, pj), cot_l=_cot(pl, pi, pj),
        area_ijk=area(pi, pj, pk), area_ijl=area(pi, pj, pl),
        len2=d[:, 0] ** 2 + d[:, 1] ** 2,
    )


def hinge_geometry(mesh, edge) -> HingeGeometry:
    """Hinge geometry of one interior edge (edge id or vertex pair)."""
    if isinstance(edge, (tuple, list, np.ndarray)):
        e = mesh.edge_index(*edge)
    else:
        e = int(edge)
    if mesh.boundary_edge[e]:
        raise BoundaryEdge(f"edge {tuple(mesh.edges[e])} has one incident triangle")
    h = hinge_arrays(mesh, [e])
    return HingeGeometry(
        i=int(h["i"][0]), j=int(h["j"][0]), k=int(h["k"][0]), l=int(h["l"][0]),
        cot_ijk=float(h["cot_ijk"][0]), cot_ijl=float(h["cot_ijl"][0]),
        cot_jik=float(h["cot_jik"][0]), cot_jil=float(h["cot_jil"][0]),
        area_ijk=float(h["area_ijk"][0]), area_ijl=float(h["area_ijl"][0]),
        length=float(np.sqrt(h["len2"][0])),
    )


# ---------------------------------------------------------------------------
# weighted Delaunay

@dataclass(frozen=True)
class WeightedPointSet:
    """Points with power weights; ``heights`` overrides the lift when given."""
    points: np.ndarray
    weights: np.ndarray
    heights: np.ndarray | None = None

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float).reshape(-1, 2)
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if len(w) != len(p):
            raise ValidationError("one weight per point required")
        if not np.all(np.isfinite(w)):
            raise ValidationError("weights must be finite")
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_heights(cls, points, s):
        """Weights ``w = x^2 + y^2 - 2 s`` from convex-function samples ``s``."""
        p = np.asarray(points, dtype=float).reshape(-1, 2)
        s = np.asarray(s, dtype=float).reshape(-1)
        return cls(p, (p ** 2).sum(axis=1) - 2.0 * s, s)

    def lift(self):
        if self.heights is not None:
            return np.asarray(self.heights, dtype=float)
        return 0.5 * ((self.points ** 2).sum(axis=1) - self.weights)


class WeightedDelaunayResult(NamedTuple):
    mesh: Mesh2D
    hidden: np.ndarray  # indices of input points not in the mesh
    vertex_map: np.ndarray  # mesh vertex -> input point index
    flat_edges: np.ndarray  # mesh edge ids whose lifted hinge is flat

    @property
    def unique(self):
        return len(self.flat_edges) == 0


def _check_general(points):
    if len(points) < 3:
        raise CollinearInput("need at least three points")
    key = np.unique(points, axis=0)
    if len(key) != len(points):
        raise ValidationError("points must be pairwise distinct")
    a = points[0]
    far = int(np.argmax(((points - a) ** 2).sum(axis=1)))
    b = points[far]
    s = orient2d(np.broadcast_to(a, points.shape), np.broadcast_to(b, points.shape), points)
    if not np.any(s != 0):
        raise CollinearInput("all points are collinear")


def _lower_hull(points, h):
    p3 = np.column_stack([points, h])
    try:
        hull = ConvexHull(p3)
    except QhullError:
        # every lifted point coplanar: any triangulation of the 2D hull is lower
        return Delaunay(points).simplices.copy()
    tris = hull.simplices[hull.equations[:, 2] < -1e-12]
    # orient counter-clockwise in the plane; drop facets that project flat
    s = orient2d(points[tris[:, 0]], points[tris[:, 1]], points[tris[:, 2]])
    tris = tris[s != 0]
    s = s[s != 0]
    tris[s < 0] = tris[s < 0][:, [0, 2, 1]]
    return tris


def _hinge_signs(mesh, h):
    """+1 convex, 0 flat, -1 reflex for every interior edge (exact)."""
    e = np.flatnonzero(mesh.interior_edge)
    i, j = mesh.edges[e, 0], mesh.edges[e, 1]
    k, l = mesh.edge_opposite[e, 0], mesh.edge_opposite[e, 1]
    v = mesh.vertices
    lift = np.column_stack([v, h])
    # (i, j, k) is counter-clockwise because k sits in the i->j triangle
    sign = lifted_orient(lift[i], lift[j], lift[k], lift[l])
    return e, sign


def _flip_round(mesh, h, edges_to_flip):
    """Flip a conflict-free subset of the given edges; returns new triangles."""
    t = mesh.triangles.copy()
    v = mesh.vertices
    busy = np.zeros(len(t), dtype=bool)
    flipped = 0
    for e in edges_to_flip:
        t0, t1 = mesh.edge_triangles[e]
        if busy[t0] or busy[t1]:
            continue
        i, j = mesh.edges[e]
        k, l = mesh.edge_opposite[e]
        # new diagonal k-l; quad i, l, j, k is counter-clockwise
        s = orient2d(v[[k, l]], v[[l, k]], v[[i, j]])
        # triangles (k, l, j)? use (i, l, k) and (j, k, l) orientation checks
        a = orient2d(v[[i]], v[[l]], v[[k]])[0]
        b = orient2d(v[[j]], v[[k]], v[[l]])[0]
        del s
        if a <= 0 or b <= 0:
            continue
        t[t0] = (i, l, k)
        t[t1] = (j, k, l)
        busy[t0] = busy[t1] = True
        flipped += 1
    return t, flipped


def _canonicalize(mesh, h, max_rounds=200):
    """Lawson flips until every hinge is convex and flat hinges use the
    diagonal through the lowest vertex index of their quad."""
    for _ in range(max_rounds):
        e, sign = _hinge_signs(mesh, h)
        reflex = e[sign < 0]
        if len(reflex):
            t, n = _flip_round(mesh, h, reflex)
            if n:
                mesh = Mesh2D(mesh.vertices, t, mesh.ghost)
                continue
        flat = e[sign == 0]
        if len(flat):
            ij = mesh.edges[flat]
            kl = mesh.edge_opposite[flat]
            quad_min = np.minimum(ij.min(axis=1), kl.min(axis=1))
            wrong = flat[ij.min(axis=1) != quad_min]
            if len(wrong):
                t, n = _flip_round(mesh, h, wrong)
                if n:
                    mesh = Mesh2D(mesh.vertices, t, mesh.ghost)
                    continue
        break
    e, sign = _hinge_signs(mesh, h)
    return mesh, e[sign == 0]


def weighted_delaunay(pts: WeightedPointSet) -> WeightedDelaunayResult:
    """Regular triangulation by lower convex hull of the lifted points.

    Points whose lift lies strictly above the lower hull are hidden.  Flat
    lifted facets are split along the lowest-index diagonal and reported in
    ``flat_edges``.
    """
    points = pts.points
    _check_general(points)
    h = pts.lift()
    tris = _lower_hull(points, h)
    used = np.zeros(len(points), dtype=bool)
    used[tris.ravel()] = True
    vertex_map = np.flatnonzero(used)
    remap = np.full(len(points), -1)
    remap[vertex_map] = np.arange(len(vertex_map))
    mesh = Mesh2D(points[vertex_map], remap[tris])
    mesh, flat = _canonicalize(mesh, h[vertex_map])
    return WeightedDelaunayResult(mesh, np.flatnonzero(~used), vertex_map, flat)


def delaunay(points):
    """Classical Delaunay triangulation (equal weights)."""
    points = np.asarray(points, dtype=float)
    return weighted_delaunay(WeightedPointSet(points, np.zeros(len(points)))).mesh


def q_adapted_triangulation(points, s) -> Mesh2D:
    """Triangulation whose hinges are all convex or flat for convex ``s``.

    ``s`` is anything with ``values(points)`` (an SField) or a plain callable.
    """
    points = np.asarray(points, dtype=float)
    vals = s.values(points) if hasattr(s, "values") else np.asarray(s(points), dtype=float)
    res = weighted_delaunay(WeightedPointSet.from_heights(points, vals))
    if len(res.hidden):
        raise ValidationError(f"{len(res.hidden)} points hidden: s is not convex on these points")
    return res.mesh


# ---------------------------------------------------------------------------
# refinement and ghosts

def _refine_once(mesh):
    n = mesh.n_vertices
    E = mesh.n_edges
    mids = 0.5 * (mesh.vertices[mesh.edges[:, 0]] + mesh.vertices[mesh.edges[:, 1]])
    v = np.vstack([mesh.vertices, mids])
    t = mesh.triangles
    te = mesh.triangle_edges + n  # midpoint of local edge r = (t[r], t[r+1])
    a, b, c = t[:, 0], t[:, 1], t[:, 2]
    mab, mbc, mca = te[:, 0], te[:, 1], te[:, 2]
    new_t = np.concatenate([
        np.stack([a, mab, mca], 1), np.stack([mab, b, mbc], 1),
        np.stack([mca, mbc, c], 1), np.stack([mab, mbc, mca], 1)])
    ghost = np.concatenate([mesh.ghost, mesh.ghost[mesh.edges].any(axis=1)])
    rows = np.concatenate([np.arange(n), np.arange(E) + n, np.arange(E) + n])
    cols = np.concatenate([np.arange(n), mesh.edges[:, 0], mesh.edges[:, 1]])
    vals = np.concatenate([np.ones(n), np.full(2 * E, 0.5)])
    P = sp.csr_matrix((vals, (rows, cols)), shape=(n + E, n))
    return Mesh2D(v, new_t, ghost), P


def refine(mesh, levels=1):
    """Uniform 1-to-4 midpoint refinement.

    Returns ``(fine, P)`` where ``P[k, i]`` is the value of coarse hat ``i``
    at fine vertex ``k`` (entries 1, 1/2 or 0).  Coarse vertices keep their
    indices in the fine mesh.
    """
    if int(levels) < 1:
        raise ValidationError("levels must be >= 1")
    P = sp.identity(mesh.n_vertices, format="csr")
    for _ in range(int(levels)):
        mesh, Pl = _refine_once(mesh)
        P = (Pl @ P).tocsr()
    return mesh, P


def reflect(p, a, b):
    """Mirror point(s) p across the line through a and b."""
    p, a, b = (np.asarray(x, dtype=float) for x in (p, a, b))
    d = b - a
    t = ((p - a) * d).sum(axis=-1, keepdims=True) / (d * d).sum(axis=-1, keepdims=True)
    foot = a + t * d
    return 2.0 * foot - p


def add_ghost_layer(mesh) -> Mesh2D:
    """One ghost vertex per boundary edge, mirrored from the opposite vertex."""
    if mesh.ghost.any():
        raise ValidationError("mesh already carries ghosts")
    mesh.boundary_loop()  # validates a single simple boundary polygon
    be = np.flatnonzero(mesh.boundary_edge)
    i, j = mesh.edges[be, 0], mesh.edges[be, 1]
    fwd = mesh.edge_triangles[be, 0] >= 0
    k = np.where(fwd, mesh.edge_opposite[be, 0], mesh.edge_opposite[be, 1])
    v = mesh.vertices
    g = reflect(v[k], v[i], v[j])
    n = mesh.n_vertices
    gid = n + np.arange(len(be))
    # interior lies left of i->j when fwd; the ghost triangle runs the other way
    a = np.where(fwd, j, i)
    b = np.where(fwd, i, j)
    tris = np.vstack([mesh.triangles, np.stack([a, b, gid], 1)])
    ghost = np.concatenate([np.zeros(n, dtype=bool), np.ones(len(be), dtype=bool)])
    return Mesh2D(np.vstack([v, g]), tris, ghost)


# ---------------------------------------------------------------------------
# point location

class TriangleLocator:
    """Bucket-grid point location with barycentric coordinates."""

    def __init__(self, mesh, cells=None):
        self.mesh = mesh
        v = mesh.vertices
        p = v[mesh.triangles]
        lo, hi = v.min(axis=0), v.max(axis=0)
        span = np.maximum(hi - lo, 1e-300)
        if cells is None:
            cells = max(1, int(np.sqrt(mesh.n_triangles / 2.0)))
        self.lo, self.span, self.nc = lo, span, cells
        tlo = np.floor((p.min(axis=1) - lo) / span * cells).astype(int).clip(0, cells - 1)
        thi = np.floor((p.max(axis=1) - lo) / span * cells).astype(int).clip(0, cells - 1)
        buckets = [[] for _ in range(cells * cells)]
        for t in range(mesh.n_triangles):
            for bx in range(tlo[t, 0], thi[t, 0] + 1):
                for by in range(tlo[t, 1], thi[t, 1] + 1):
                    buckets[bx * cells + by].append(t)
        width = max(len(b) for b in buckets)
        table = np.full((cells * cells, max(width, 1)), -1, dtype=np.int64)
        for n, b in enumerate(buckets):
            table[n, :len(b)] = b
        self.table = table
        # barycentric maps: lambda = A @ (x - p0) for lambda_1, lambda_2
        u = p[:, 1] - p[:, 0]
        w = p[:, 2] - p[:, 0]
        det = u[:, 0] * w[:, 1] - u[:, 1] * w[:, 0]
        self.inv = np.stack([np.stack([w[:, 1], -w[:, 0]], 1),
                             np.stack([-u[:, 1], u[:, 0]], 1)], 1) / det[:, None, None]
        self.p0 = p[:, 0]

    def barycentric(self, tri, x):
        lam12 = np.einsum("nij,nj->ni", self.inv[tri], x - self.p0[tri])
        return np.column_stack([1.0 - lam12.sum(axis=1), lam12])

    def locate(self, x, tol=1e-10):
        """Return ``(tri, bary)``; points outside the mesh get the nearest-
        by-barycentric triangle of their bucket and a ValidationError when
        they are clearly outside."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        b = np.floor((x - self.lo) / self.span * self.nc).astype(int).clip(0, self.nc - 1)
        cand = self.table[b[:, 0] * self.nc + b[:, 1]]
        best = np.full(len(x), -1, dtype=np.int64)
        score = np.full(len(x), -np.inf)
        for c in range(cand.shape[1]):
            t = cand[:, c]
            ok = t >= 0
            if not ok.any():
                continue
            lam = np.full((len(x), 3), -np.inf)
            lam[ok] = self.barycentric(t[ok], x[ok])
            m = lam.min(axis=1)
            better = m > score
            best[better] = t[better]
            score[better] = m[better]
        if np.any(score < -tol * 1e3) or np.any(best < 0):
            bad = int(np.argmin(score))
            raise ValidationError(f"point {x[bad].tolist()} is outside the mesh")
        return best, self.barycentric(best, x)


# ---------------------------------------------------------------------------
# generators

def square_mesh(n, x0=0.0, y0=0.0, size=1.0, pattern="alternate"):
    """Structured ``n x n`` grid of the square, two triangles per cell.

    ``pattern`` is ``"right"`` (all diagonals SW-NE), ``"left"`` or
    ``"alternate"`` (checkerboard of diagonals).
    """
    m = n + 1
    xs = x0 + size * np.arange(m) / n
    ys = y0 + size * np.arange(m) / n
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    v = np.column_stack([X.ravel(), Y.ravel()])
    tris = []
    for r in range(n):
        for c in range(n):
            a = r * m + c
            b = a + 1
            d = a + m
            e = d + 1
            right = pattern == "right" or (pattern == "alternate" and (r + c) % 2 == 0)
            if right:
                tris += [(a, b, e), (a, e, d)]
            else:
                tris += [(a, b, d), (b, e, d)]
    return Mesh2D(v, tris)


def polygon_points(n, radius=1.0, phase=0.0, center=(0.0, 0.0)):
    th = phase + 2.0 * np.pi * np.arange(n) / n
    return np.column_stack([center[0] + radius * np.cos(th), center[1] + radius * np.sin(th)])


def disk_mesh(n_boundary, n_interior, radius=1.0, seed=0, min_gap=0.5):
    """Delaunay mesh of the regular ``n_boundary``-gon with jittered interior
    points kept away from the boundary by ``min_gap`` boundary spacings."""
    rng = np.random.default_rng(seed)
    bnd = polygon_points(n_boundary, radius)
    spacing = 2.0 * np.pi * radius / n_boundary
    inner = radius * np.cos(np.pi / n_boundary) - min_gap * spacing
    pts = []
    # sunflower layout with a small jitter: near-uniform, no cocircular sets
    golden = np.pi * (3.0 - np.sqrt(5.0))
    for q in range(n_interior):
        r = inner * np.sqrt((q + 0.5) / n_interior)
        th = q * golden
        pts.append((r * np.cos(th), r * np.sin(th)))
    pts = np.asarray(pts).reshape(-1, 2)
    if len(pts):
        pts += rng.normal(scale=0.05 * spacing, size=pts.shape)
        rr = np.hypot(pts[:, 0], pts[:, 1])
        scale = np.minimum(1.0, inner / np.maximum(rr, 1e-300))
        pts *= scale[:, None]
    return delaunay(np.vstack([bnd, pts]))


def polygon_mesh(corners, h, seed=0):
    """Delaunay mesh of a convex polygon with target spacing ``h``.

    Each side is subdivided uniformly; interior points form a jittered
    hexagonal lattice kept at least ``h/2`` from the boundary.  Boundary
    vertices come first in polygon order.  Returns ``(mesh, corner_index)``.
    """
    c = np.asarray(corners, dtype=float)
    if len(c) < 3 or np.any(orient2d(c, np.roll(c, -1, 0), np.roll(c, -2, 0)) <= 0):
        raise ValidationError("corners must form a strictly convex CCW polygon")
    bnd, corner_index = [], []
    for a, b in zip(c, np.roll(c, -1, 0)):
        k = max(1, int(np.ceil(np.linalg.norm(b - a) / h)))
        corner_index.append(len(bnd))
        t = np.arange(k)[:, None] / k
        bnd.extend(a + t * (b - a))
    bnd = np.asarray(bnd)
    lo, hi = c.min(axis=0), c.max(axis=0)
    dy = h * np.sqrt(3.0) / 2
    ys = np.arange(lo[1], hi[1] + dy, dy)
    pts = []
    for r, y in enumerate(ys):
        xs = np.arange(lo[0] + (0.5 * h if r % 2 else 0.0), hi[0] + h, h)
        pts.append(np.column_stack([xs, np.full_like(xs, y)]))
    pts = np.vstack(pts)
    rng = np.random.default_rng(seed)
    pts = pts + rng.uniform(-0.05 * h, 0.05 * h, pts.shape)
    # signed distance to each side (positive inside for CCW)
    e = np.roll(c, -1, 0) - c
    nrm = np.column_stack([-e[:, 1], e[:, 0]]) / np.linalg.norm(e, axis=1)[:, None]
    dist = ((pts[:, None, :] - c[None]) * nrm[None]).sum(axis=2).min(axis=1)
    pts = pts[dist > 0.5 * h]
    return delaunay(np.vstack([bnd, pts])), np.asarray(corner_index)
