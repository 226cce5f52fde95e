"""Deterministic SVG figures of meshes with scalar or tensor overlays."""
from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .fields import eigvals_packed


def _cubehelix(n=256, start=0.5, rot=-1.5, hue=1.0, gamma=1.0):
    """Cubehelix table (monotone luminance from black to white) as uint8 RGB."""
    t = np.linspace(0.0, 1.0, n) ** gamma
    phi = 2 * np.pi * (start / 3 + rot * np.linspace(0.0, 1.0, n))
    amp = hue * t * (1 - t) / 2
    r = t + amp * (-0.14861 * np.cos(phi) + 1.78277 * np.sin(phi))
    g = t + amp * (-0.29227 * np.cos(phi) - 0.90649 * np.sin(phi))
    b = t + amp * (1.97294 * np.cos(phi))
    rgb = np.clip(np.column_stack([r, g, b]), 0.0, 1.0)
    return np.rint(rgb * 255).astype(np.uint8)


# Fixed 256-entry table; luminance increases monotonically with the index.
COLORMAP = _cubehelix()


def colour(values, vmin=None, vmax=None):
    """Hex colours for ``values`` mapped linearly onto COLORMAP."""
    v = np.asarray(values, dtype=float)
    lo = float(v.min()) if vmin is None else vmin
    hi = float(v.max()) if vmax is None else vmax
    t = np.zeros_like(v) if hi <= lo else (v - lo) / (hi - lo)
    idx = np.clip(np.rint(t * 255), 0, 255).astype(int)
    return ["#%02x%02x%02x" % tuple(COLORMAP[i]) for i in idx]


def glyphs(mesh, tensor, length=None):
    """Segments (m, 2, 2) through triangle centroids along the major
    eigenvector, of length ``length * |l_max - l_min| / tr``."""
    t = np.asarray(tensor, dtype=float).reshape(-1, 3)
    if len(t) == 1:
        t = np.repeat(t, mesh.n_triangles, axis=0)
    lmin, lmax = eigvals_packed(t).T
    strength = (lmax - lmin) / (lmax + lmin)
    ang = 0.5 * np.arctan2(2 * t[:, 1], t[:, 0] - t[:, 2])
    if length is None:
        length = 0.8 * np.sqrt(np.median(mesh.areas()))
    half = 0.5 * length * strength
    d = np.column_stack([np.cos(ang), np.sin(ang)]) * half[:, None]
    c = mesh.centroids()
    return np.stack([c - d, c + d], axis=1)


def _fmt(x):
    return f"{x:.3f}".rstrip("0").rstrip(".") if np.isfinite(x) else "0"


def render_svg(mesh, scalar=None, tensor=None, width=600, title=None, stroke="#404040"):
    """SVG document of ``mesh``.

    ``scalar`` (one value per triangle) becomes a cell fill from COLORMAP
    with a min/max legend; ``tensor`` (packed xx, xy, yy per triangle, or
    one constant tensor) becomes principal-eigenvector segments scaled by
    the anisotropy strength.  Ghost triangles are not drawn.  The output
    depends only on the inputs.
    """
    v = np.asarray(mesh.vertices, dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValidationError("non-finite vertex coordinates")
    keep = np.ones(mesh.n_triangles, dtype=bool)
    ghost = getattr(mesh, "ghost", None)
    if ghost is not None and np.any(ghost):
        keep = ~ghost[mesh.triangles].any(axis=1)
    lo, hi = v.min(axis=0), v.max(axis=0)
    span = float(max(hi - lo)) or 1.0
    pad = 20.0
    scale = (width - 2 * pad) / span
    height = int(np.ceil((hi[1] - lo[1]) * scale + 2 * pad)) + (30 if scalar is not None else 0)

    def xy(p):
        return (p[..., 0] - lo[0]) * scale + pad, (hi[1] - p[..., 1]) * scale + pad

    out = ['<?xml version="1.0" encoding="UTF-8"?>',
           f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">']
    if title:
        out.append(f"<title>{title}</title>")
    fills = None
    if scalar is not None:
        s = np.asarray(scalar, dtype=float).reshape(-1)
        if s.shape[0] != mesh.n_triangles or not np.all(np.isfinite(s[keep])):
            raise ValidationError("scalar overlay needs one finite value per triangle")
        fills = colour(s[keep])
    X, Y = xy(v)
    out.append(f'<g stroke="{stroke}" stroke-width="0.5" stroke-linejoin="round">')
    for n, tri in enumerate(mesh.triangles[keep]):
        pts = " ".join(f"{_fmt(X[i])},{_fmt(Y[i])}" for i in tri)
        fill = fills[n] if fills is not None else "none"
        out.append(f'<polygon points="{pts}" fill="{fill}"/>')
    out.append("</g>")
    if tensor is not None:
        seg = glyphs(mesh, tensor)[keep]
        if not np.all(np.isfinite(seg)):
            raise ValidationError("non-finite tensor overlay")
        gx, gy = xy(seg)
        out.append('<g stroke="#d62728" stroke-width="1.2" stroke-linecap="round">')
        for a in range(len(seg)):
            out.append(f'<line x1="{_fmt(gx[a, 0])}" y1="{_fmt(gy[a, 0])}" '
                       f'x2="{_fmt(gx[a, 1])}" y2="{_fmt(gy[a, 1])}"/>')
        out.append("</g>")
    if scalar is not None:
        y0 = height - 22
        n = 64
        w = (width - 2 * pad) / n
        out.append('<g stroke="none">')
        for k, c in enumerate(colour(np.arange(n), 0, n - 1)):
            out.append(f'<rect x="{_fmt(pad + k * w)}" y="{y0}" width="{_fmt(w + 0.5)}" height="8" fill="{c}"/>')
        out.append("</g>")
        lo_s, hi_s = float(np.min(s[keep])), float(np.max(s[keep]))
        out.append(f'<text x="{pad}" y="{height - 2}" font-size="10">{lo_s:.4g}</text>')
        out.append(f'<text x="{width - pad}" y="{height - 2}" font-size="10" '
                   f'text-anchor="end">{hi_s:.4g}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
