import numpy as np
import pytest

from geohom import phantoms
from geohom.errors import ValidationError


def test_blob_regions_partition_the_plane():
    ph = phantoms.blob()
    p = np.random.default_rng(0).uniform(-1, 1, (2000, 2))
    masks = np.array([ph.region(r, p) for r in ("circle", "bar", "background")])
    assert np.array_equal(masks.sum(0), np.ones(len(p)))
    v = ph.sigma.at(p)[:, 0]
    assert np.all(v[masks[0]] == 10.0) and np.all(v[masks[1]] == 5.0) and np.all(v[masks[2]] == 1.0)


def test_laminate_values():
    ph = phantoms.laminate()
    x = np.array([[-0.49, 0.0], [-0.44, 0.0], [0.8, 0.0]])
    assert np.allclose(ph.sigma.at(x)[:, 0], [0.05, 1.95, 1.0])
    assert ph.axis == pytest.approx(np.pi / 2)


def test_graded_laminate():
    m, sig, cols = phantoms.graded_laminate(16, band=0.25)
    assert m.n_triangles == 2 * 16 * 16 and len(sig) == m.n_triangles
    assert np.allclose(cols[:4], 1.0) and np.allclose(cols[4:12:2], 0.05)
    # column widths are proportional to the conductivity
    xs = np.unique(m.vertices[:, 0])
    assert np.allclose(np.diff(xs) / cols, (np.diff(xs) / cols)[0])
    with pytest.raises(ValidationError):
        phantoms.graded_laminate(2)


def test_registry():
    assert phantoms.get("two-phase", a1=2.0).sigma.at([[0.1, 0.0]])[0, 0] == 2.0
    with pytest.raises(ValidationError):
        phantoms.get("nope")
