import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from geohom.mesh import delaunay

settings.register_profile("geohom", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("geohom")

ACCEPTANCE_LINES = []


def random_points(n, seed, box=1.0):
    """Random points in general position: the unit square corners plus jittered samples."""
    rng = np.random.default_rng(seed)
    corners = np.array([[0, 0], [box, 0], [box, box], [0, box]], float)
    return np.vstack([corners, rng.uniform(0.02 * box, 0.98 * box, size=(n - 4, 2))])


def random_mesh(n, seed):
    return delaunay(random_points(n, seed))


def cotan_oracle(mesh):
    """Cotan weights from angles via arccos, independent of the library hinge code."""
    v = mesh.vertices
    w = np.zeros(mesh.n_edges)
    for e, (i, j) in enumerate(mesh.edges):
        for k in mesh.edge_opposite[e]:
            if k < 0:
                continue
            a, b = v[i] - v[k], v[j] - v[k]
            ang = np.arccos(np.clip(a @ b / np.linalg.norm(a) / np.linalg.norm(b), -1, 1))
            w[e] += 0.5 / np.tan(ang)
    return w


@pytest.fixture
def unit_mesh():
    return random_mesh(60, 3)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
