import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.spatial import Delaunay

from conftest import cotan_oracle, random_mesh, random_points
from geohom.errors import (BoundaryEdge, CollinearInput, DegenerateTriangle, DuplicateTriangle,
                           NonManifoldEdge, ValidationError)
from geohom.mesh import (Mesh2D, TriangleLocator, WeightedPointSet, add_ghost_layer, delaunay,
                         disk_mesh, hinge_arrays, hinge_geometry, polygon_mesh, polygon_points,
                         q_adapted_triangulation, refine, square_mesh, weighted_delaunay)
from geohom.predicates import lifted_orient, orient2d


class TestValidation:
    def test_rejects_clockwise(self):
        with pytest.raises(DegenerateTriangle):
            Mesh2D([[0, 0], [0, 1], [1, 0]], [[0, 1, 2]])

    def test_rejects_repeated_vertex(self):
        with pytest.raises(DegenerateTriangle):
            Mesh2D([[0, 0], [1, 0], [0, 1]], [[0, 1, 2], [0, 0, 2]])

    def test_rejects_duplicate(self):
        with pytest.raises(DuplicateTriangle):
            Mesh2D([[0, 0], [1, 0], [0, 1]], [[0, 1, 2], [1, 2, 0]])

    def test_rejects_nonmanifold(self):
        v = [[0, 0], [1, 0], [0.5, 1], [0.5, -1], [0.6, 2]]
        with pytest.raises(NonManifoldEdge):
            Mesh2D(v, [[0, 1, 2], [1, 0, 3], [0, 1, 4]])

    def test_rejects_out_of_range_and_unreferenced(self):
        with pytest.raises(ValidationError):
            Mesh2D([[0, 0], [1, 0], [0, 1]], [[0, 1, 3]])
        with pytest.raises(ValidationError):
            Mesh2D([[0, 0], [1, 0], [0, 1], [5, 5]], [[0, 1, 2]])

    def test_rejects_nonfinite(self):
        with pytest.raises(ValidationError):
            Mesh2D([[0, 0], [1, np.nan], [0, 1]], [[0, 1, 2]])

    def test_readonly(self):
        m = square_mesh(2)
        with pytest.raises(ValueError):
            m.vertices[0, 0] = 3.0


class TestTopology:
    @given(st.integers(8, 80), st.integers(0, 10_000))
    def test_euler_identity_for_disks(self, n, seed):
        m = random_mesh(n, seed)
        assert m.euler_defect() == 0
        assert np.isclose(m.areas().sum(), 1.0)

    def test_edge_incidence(self):
        m = square_mesh(3)
        for e, (i, j) in enumerate(m.edges):
            t0, t1 = m.edge_triangles[e]
            if t0 >= 0:
                tri = list(m.triangles[t0])
                r = tri.index(i)
                assert tri[(r + 1) % 3] == j
                assert tri[(r + 2) % 3] == m.edge_opposite[e, 0]
            if t1 >= 0:
                tri = list(m.triangles[t1])
                r = tri.index(j)
                assert tri[(r + 1) % 3] == i

    def test_boundary_loop_is_ccw_cycle(self):
        m = disk_mesh(12, 10)
        loop = m.boundary_loop()
        assert len(loop) == 12
        p = m.vertices[loop]
        area = 0.5 * np.sum(p[:, 0] * np.roll(p[:, 1], -1) - np.roll(p[:, 0], -1) * p[:, 1])
        assert area > 0


class TestHinge:
    def test_right_isosceles(self):
        m = Mesh2D([[0, 0], [1, 0], [1, 1], [0, 1]], [[0, 1, 2], [0, 2, 3]])
        h = hinge_geometry(m, (0, 2))
        # angles at the diagonal endpoints are 45 degrees
        assert np.isclose(h.cot_ijk, 1.0) and np.isclose(h.cot_jil, 1.0)
        assert np.isclose(h.area_ijk, 0.5) and np.isclose(h.length, np.sqrt(2))

    def test_boundary_edge_has_no_hinge(self):
        m = square_mesh(1)
        with pytest.raises(BoundaryEdge):
            hinge_geometry(m, (0, 1))

    @given(st.integers(10, 60), st.integers(0, 10_000))
    def test_cotan_matches_angle_oracle(self, n, seed):
        m = random_mesh(n, seed)
        h = hinge_arrays(m)
        ours = 0.5 * (h["cot_k"] + h["cot_l"])
        assert np.allclose(ours, cotan_oracle(m)[h["edge"]], atol=1e-9)


class TestWeightedDelaunay:
    @given(st.integers(6, 60), st.integers(0, 10_000))
    def test_zero_weights_match_qhull_delaunay(self, n, seed):
        p = random_points(n, seed)
        p[4:] += 1e-7 * np.random.default_rng(seed).normal(size=(n - 4, 2))
        ours = delaunay(p)
        ref = Delaunay(p).simplices
        assert len(ours.triangles) == len(ref)
        # empty circumcircle: no vertex lifts below the plane of any triangle
        v = ours.vertices
        for a, b, c in v[ours.triangles]:
            lb = np.r_[b - a, ((b - a) ** 2).sum()]
            lc = np.r_[c - a, ((c - a) ** 2).sum()]
            lv = np.column_stack([v - a, ((v - a) ** 2).sum(1)])
            assert np.all(lv @ np.cross(lb, lc) >= -1e-12)

    @given(st.integers(8, 50), st.integers(0, 10_000))
    def test_convex_lift_gives_convex_hinges(self, n, seed):
        rng = np.random.default_rng(seed)
        p = random_points(n, seed)
        H = np.array([[2.0, 0.7], [0.7, 1.0]]) * rng.uniform(0.5, 2)
        s = 0.5 * np.einsum("ni,ij,nj->n", p, H, p)
        res = weighted_delaunay(WeightedPointSet.from_heights(p, s))
        assert len(res.hidden) == 0
        m = res.mesh
        e = np.flatnonzero(m.interior_edge)
        i, j = m.edges[e].T
        k, l = m.edge_opposite[e].T
        lift = np.column_stack([m.vertices, s[res.vertex_map]])
        assert np.all(lifted_orient(lift[i], lift[j], lift[k], lift[l]) >= 0)

    def test_high_point_is_hidden(self):
        p = np.array([[0, 0], [1, 0], [1, 1], [0, 1], [0.5, 0.5]], float)
        h = 0.5 * (p ** 2).sum(1)
        h[4] += 1.0
        res = weighted_delaunay(WeightedPointSet(p, np.zeros(5), h))
        assert res.hidden.tolist() == [4]
        assert res.mesh.n_vertices == 4

    def test_flat_quad_uses_lowest_index_diagonal(self):
        p = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float)
        res = weighted_delaunay(WeightedPointSet(p, np.zeros(4)))
        assert not res.unique
        assert (0, 2) in {tuple(e) for e in res.mesh.edges.tolist()}

    def test_weights_match_power_distance(self):
        # w = |x|^2 - 2 s: the lift from weights and from heights agree
        p = random_points(20, 1)
        s = 0.5 * (p ** 2).sum(1) + 0.1 * p[:, 0]
        a = WeightedPointSet.from_heights(p, s)
        b = WeightedPointSet(p, a.weights)
        assert np.allclose(a.lift(), b.lift())

    def test_collinear_input(self):
        with pytest.raises(CollinearInput):
            delaunay(np.column_stack([np.arange(5.0), np.arange(5.0)]))

    def test_q_adapted_rejects_nonconvex(self):
        p = random_points(30, 2)
        with pytest.raises(ValidationError):
            q_adapted_triangulation(p, lambda x: -((x - 0.5) ** 2).sum(1))


class TestPredicates:
    def test_orient_exact_on_near_degenerate(self):
        a = np.array([[0.5, 0.5]])
        b = np.array([[12.0, 12.0]])
        c = np.array([[24.0, 24.0]])
        assert orient2d(a, b, c)[0] == 0
        c2 = np.array([[24.0, np.nextafter(24.0, 25.0)]])
        assert orient2d(a, b, c2)[0] == 1


class TestRefineGhost:
    @given(st.integers(6, 40), st.integers(0, 1000), st.integers(1, 2))
    def test_refine_prolongation(self, n, seed, levels):
        m = random_mesh(n, seed)
        f, P = refine(m, levels)
        assert f.n_triangles == m.n_triangles * 4 ** levels
        assert np.allclose(P.sum(axis=1), 1.0)
        assert np.allclose(f.vertices[: m.n_vertices], m.vertices)
        # prolongation interpolates linear functions exactly
        lin = m.vertices @ [0.3, -1.2] + 0.7
        assert np.allclose(P @ lin, f.vertices @ [0.3, -1.2] + 0.7)
        assert np.isclose(f.areas().sum(), m.areas().sum())

    def test_ghost_layer(self):
        m = disk_mesh(10, 6)
        g = add_ghost_layer(m)
        nb = int(m.boundary_edge.sum())
        assert int(g.ghost.sum()) == nb
        assert not np.any(g.interior_edge[~g.ghost[g.edges].any(1)] == False)  # noqa: E712
        assert g.physical().hash() == m.hash()
        with pytest.raises(ValidationError):
            add_ghost_layer(g)


class TestIOAndGenerators:
    def test_json_roundtrip(self):
        m = add_ghost_layer(disk_mesh(8, 5))
        m2 = Mesh2D.from_json(m.to_json({"k": 1}))
        assert m2.hash() == m.hash()

    def test_json_missing_keys(self):
        with pytest.raises(ValidationError):
            Mesh2D.from_json('{"vertices": []}')

    def test_locator(self):
        m = random_mesh(40, 5)
        loc = TriangleLocator(m)
        x = np.random.default_rng(0).uniform(0, 1, (200, 2))
        tri, bary = loc.locate(x)
        assert np.all(bary >= -1e-12)
        assert np.allclose(np.einsum("nr,nrd->nd", bary, m.vertices[m.triangles[tri]]), x)
        with pytest.raises(ValidationError):
            loc.locate([[3.0, 3.0]])

    def test_polygon_mesh_boundary_first(self):
        P = polygon_points(10)
        m, corners = polygon_mesh(P, 0.3)
        assert np.allclose(m.vertices[corners], P)
        nb = int(m.boundary_vertex.sum())
        assert m.boundary_vertex[:nb].all()

    def test_polygon_mesh_rejects_nonconvex(self):
        with pytest.raises(ValidationError):
            polygon_mesh([[0, 0], [1, 0], [0.2, 0.2], [0, 1]], 0.1)

    def test_square_patterns(self):
        for pat in ("right", "left", "alternate"):
            m = square_mesh(4, pattern=pat)
            assert m.n_triangles == 32 and np.isclose(m.areas().sum(), 1.0)
