"""Artifact files: provenance headers, field CSVs and field specifications."""
from __future__ import annotations

import hashlib
import json
import os

import numpy as np

from . import __version__
from .errors import CarrierMismatch, ValidationError
from .fields import QField, Raster, SField, SigmaField
from .mesh import Mesh2D


def config_hash(config):
    """Short SHA-256 of a JSON-serializable config (key order independent)."""
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def provenance(command, config, inputs=()):
    """Header lines: tool version, config hash and config, input hashes.

    ``inputs`` are paths; names are recorded as given, contents by hash.
    """
    lines = [f"geohom {__version__}", f"command {command}",
             f"config {config_hash(config)} {json.dumps(config, sort_keys=True, default=str)}"]
    for p in inputs:
        if p and os.path.isfile(p):
            lines.append(f"input {p} {file_hash(p)}")
    return lines


def with_header(text, header, kind="csv"):
    """Prefix ``text`` with header lines in the comment syntax of ``kind``."""
    if not header:
        return text
    if kind == "csv":
        return "".join(f"# {h}\n" for h in header) + text
    if kind == "svg":
        note = "<!--\n" + "\n".join(h.replace("--", "- -") for h in header) + "\n-->\n"
        if text.startswith("<?xml"):
            first, rest = text.split("\n", 1)
            return first + "\n" + note + rest
        return note + text
    raise ValidationError(f"unknown artifact kind {kind!r}")


def write_text(path, text):
    with open(path, "w", newline="\n") as f:
        f.write(text)


def _data_lines(text):
    """Non-comment, non-empty lines; the first is returned separately when it
    is a column header (not parseable as numbers)."""
    rows = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    head = None
    if rows:
        try:
            [float(x) for x in rows[0].split(",")]
        except ValueError:
            head, rows = rows[0], rows[1:]
    return head, rows


def _comments(text):
    return [ln.lstrip()[1:].strip() for ln in text.splitlines() if ln.lstrip().startswith("#")]


def read_table(text):
    """(column names or None, float array of shape (rows, cols))."""
    head, rows = _data_lines(text)
    try:
        arr = np.array([[float(x) for x in r.split(",")] for r in rows], dtype=float)
    except ValueError as exc:
        raise ValidationError(f"malformed numeric row: {exc}") from None
    if arr.size and arr.ndim != 2:
        raise ValidationError("ragged table")
    names = [c.strip() for c in head.split(",")] if head else None
    return names, arr.reshape(len(rows), -1)


def table_to_csv(columns, names):
    """CSV with a column-name row; integer columns stay integers, floats
    are written with full round-trip precision."""
    cols = [np.asarray(c).reshape(-1) for c in columns]
    fmts = [(lambda x: str(int(x))) if np.issubdtype(c.dtype, np.integer) else (lambda x: repr(float(x)))
            for c in cols]
    lines = [",".join(names)]
    for row in zip(*cols):
        lines.append(",".join(f(x) for f, x in zip(fmts, row)))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# cell fields

def cell_field_to_csv(values, carrier):
    """Packed per-cell tensors with their carrier named in a comment line."""
    v = np.asarray(values, dtype=float)
    if v.ndim == 1:
        v = np.column_stack([v, np.zeros_like(v), v])
    if isinstance(carrier, Mesh2D):
        where = f"# carrier mesh {carrier.hash()}\n"
    elif isinstance(carrier, Raster):
        where = f"# carrier raster {carrier.header()}\n"
    else:
        raise ValidationError("cell field needs a mesh or raster carrier")
    return where + table_to_csv(v.T, ["xx", "xy", "yy"])


def read_cell_field(text, mesh=None):
    """(values (n, 3), carrier).  A mesh carrier must be supplied and match
    the recorded hash; a raster carrier is rebuilt from its header."""
    carrier = None
    for c in _comments(text):
        parts = c.split(None, 2)
        if len(parts) == 3 and parts[0] == "carrier":
            if parts[1] == "raster":
                carrier = Raster.from_header(parts[2])
            elif parts[1] == "mesh":
                if mesh is None:
                    raise ValidationError("field is carried by a mesh; pass --mesh")
                if parts[2] != mesh.hash():
                    raise CarrierMismatch("field file was written for a different mesh")
                carrier = mesh
    if carrier is None:
        if mesh is None:
            raise ValidationError("field file names no carrier")
        carrier = mesh
    _, arr = read_table(text)
    if arr.shape[1] == 1:
        arr = np.column_stack([arr[:, 0], np.zeros(len(arr)), arr[:, 0]])
    if arr.shape[1] != 3:
        raise ValidationError("cell field needs 1 or 3 columns")
    return arr, carrier


def vertex_field_to_csv(values, names=("s",)):
    v = np.asarray(values, dtype=float)
    cols = [v] if v.ndim == 1 else list(v.T)
    return table_to_csv(cols, list(names))


# ---------------------------------------------------------------------------
# field specifications

def _kwargs(spec):
    name, _, rest = spec.partition(":")
    kw = {}
    for item in filter(None, rest.split(",")):
        k, eq, v = item.partition("=")
        if not eq:
            raise ValidationError(f"expected key=value in {spec!r}")
        kw[k.strip()] = float(v)
    return name.strip(), kw


def load_sigma(spec, mesh=None):
    """Conductivity from a cell-field file or a phantom name with options,
    e.g. ``laminate`` or ``two-phase:a1=1,a2=10,fraction=0.5,period=0.25``."""
    from . import phantoms
    if os.path.isfile(spec):
        with open(spec) as f:
            vals, carrier = read_cell_field(f.read(), mesh)
        return SigmaField(vals, carrier)
    name, kw = _kwargs(spec)
    if name == "constant" and "value" not in kw and kw:
        raise ValidationError("constant takes value=<c>")
    return phantoms.get(name, **kw).sigma


def load_q(spec, mesh=None):
    """QField from a cell-field file or ``const:xx=..,xy=..,yy=..``."""
    if os.path.isfile(spec):
        with open(spec) as f:
            vals, carrier = read_cell_field(f.read(), mesh)
        return QField(vals, carrier)
    name, kw = _kwargs(spec)
    if name != "const":
        raise ValidationError(f"unknown Q specification {spec!r}")
    return QField([kw.get("xx", 1.0), kw.get("xy", 0.0), kw.get("yy", 1.0)])


def load_s(spec):
    """Potential from a raster CSV (``# carrier raster`` header, one column)
    or ``paraboloid`` / ``quadratic:hxx=..,hxy=..,hyy=..``."""
    if os.path.isfile(spec):
        with open(spec) as f:
            text = f.read()
        raster = None
        for c in _comments(text):
            parts = c.split(None, 2)
            if len(parts) == 3 and parts[:2] == ["carrier", "raster"]:
                raster = Raster.from_header(parts[2])
        if raster is None:
            raise ValidationError("s file needs a '# carrier raster' line")
        _, arr = read_table(text)
        return SField.on_raster(raster, arr[:, 0])
    name, kw = _kwargs(spec)
    if name == "paraboloid":
        return SField.paraboloid()
    if name == "quadratic":
        H = np.array([[kw.get("hxx", 1.0), kw.get("hxy", 0.0)],
                      [kw.get("hxy", 0.0), kw.get("hyy", 1.0)]])
        if np.linalg.eigvalsh(H)[0] <= 0:
            raise ValidationError("quadratic s needs a positive-definite Hessian")
        return SField.quadratic(H)
    raise ValidationError(f"unknown s specification {spec!r}")
