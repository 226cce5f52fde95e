import numpy as np
import pytest

from geohom.errors import CarrierMismatch, ValidationError
from geohom.fields import Raster
from geohom.io import (cell_field_to_csv, config_hash, load_q, load_s, load_sigma, provenance,
                       read_cell_field, read_table, table_to_csv, with_header)
from geohom.mesh import square_mesh


def test_config_hash_is_order_independent():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


def test_provenance_hashes_inputs(tmp_path):
    f = tmp_path / "x.csv"
    f.write_text("1\n")
    lines = provenance("solve", {"k": 1}, [str(f), str(tmp_path / "missing")])
    assert lines[0].startswith("geohom ") and lines[1] == "command solve"
    assert len(lines) == 4 and lines[3].startswith(f"input {f} ")


def test_headers():
    assert with_header("a\n", ["h"]) == "# h\na\n"
    svg = with_header('<?xml version="1.0"?>\n<svg/>\n', ["x -- y"], "svg")
    assert svg.splitlines()[1] == "<!--" and "- -" in svg
    with pytest.raises(ValidationError):
        with_header("a", ["h"], "bin")


def test_table_roundtrip():
    it = np.arange(3)
    x = np.array([0.1, 1 / 3, 1e-17])
    text = table_to_csv([it, x], ["i", "x"])
    assert text.splitlines()[1] == "0,0.1"
    names, arr = read_table("# c\n" + text)
    assert names == ["i", "x"] and np.array_equal(arr[:, 1], x)
    with pytest.raises(ValidationError):
        read_table("a,b\n1,zz\n")


def test_cell_field_carriers():
    m = square_mesh(2)
    vals = np.arange(24.0).reshape(8, 3)
    back, carrier = read_cell_field(cell_field_to_csv(vals, m), m)
    assert np.array_equal(back, vals) and carrier is m
    with pytest.raises(CarrierMismatch):
        read_cell_field(cell_field_to_csv(vals, m), square_mesh(3))
    with pytest.raises(ValidationError):
        read_cell_field(cell_field_to_csv(vals, m))
    r = Raster.square(2)
    back, carrier = read_cell_field(cell_field_to_csv(np.ones(4), r))
    assert carrier == r and np.allclose(back, [1, 0, 1])


def test_specs(tmp_path):
    assert np.allclose(load_q("const:xx=2,yy=3").at([[0, 0]]), [[2, 0, 3]])
    assert load_s("quadratic:hxx=2,hyy=1").values([[1.0, 0.0]])[0] == pytest.approx(1.0)
    with pytest.raises(ValidationError):
        load_s("quadratic:hxx=-1")
    with pytest.raises(ValidationError):
        load_q("bogus")
    with pytest.raises(ValidationError):
        load_sigma("blob:circle")
    assert load_sigma("constant:value=2").at([[0, 0]])[0, 0] == 2.0
