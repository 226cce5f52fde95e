"""Conductivity fields and the transforms between sigma, Q and s.

Symmetric 2x2 tensors are stored as rows ``(a11, a12, a22)``.  A field lives
on one of three carriers: a :class:`~geohom.mesh.Mesh2D` (one value per
triangle), a :class:`Raster` (one value per cell), or an analytic callable.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import (CarrierMismatch, ConvexityViolation, EllipticityViolation,
                     PathDependence, ValidationError)
from .mesh import Mesh2D, TriangleLocator

R = np.array([[0.0, -1.0], [1.0, 0.0]])

# reference points of the 3-point sub-cell rule (barycentric)
SUBCELL_BARY = np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]])


def to_matrix(v):
    """(n, 3) packed -> (n, 2, 2)."""
    v = np.asarray(v, dtype=float).reshape(-1, 3)
    out = np.empty((len(v), 2, 2))
    out[:, 0, 0] = v[:, 0]
    out[:, 0, 1] = out[:, 1, 0] = v[:, 1]
    out[:, 1, 1] = v[:, 2]
    return out


def to_packed(m):
    """(n, 2, 2) -> (n, 3); symmetrises."""
    m = np.asarray(m, dtype=float).reshape(-1, 2, 2)
    return np.column_stack([m[:, 0, 0], 0.5 * (m[:, 0, 1] + m[:, 1, 0]), m[:, 1, 1]])


def eigvals_packed(v):
    """Ascending eigenvalues of packed symmetric tensors, (n, 2)."""
    v = np.asarray(v, dtype=float).reshape(-1, 3)
    mean = 0.5 * (v[:, 0] + v[:, 2])
    rad = np.hypot(0.5 * (v[:, 0] - v[:, 2]), v[:, 1])
    return np.column_stack([mean - rad, mean + rad])


def det_packed(v):
    v = np.asarray(v, dtype=float).reshape(-1, 3)
    return v[:, 0] * v[:, 2] - v[:, 1] ** 2


def rotate_hessian(h):
    """R H R^T for packed Hessians: (hxx, hxy, hyy) -> (hyy, -hxy, hxx)."""
    h = np.asarray(h, dtype=float).reshape(-1, 3)
    return np.column_stack([h[:, 2], -h[:, 1], h[:, 0]])


def _as_packed(value):
    a = np.asarray(value, dtype=float)
    if a.ndim == 0:
        return np.array([float(a), 0.0, float(a)])
    if a.shape == (2, 2):
        if abs(a[0, 1] - a[1, 0]) > 1e-14 * max(1.0, np.abs(a).max()):
            raise ValidationError("tensor must be symmetric")
        return to_packed(a)[0]
    if a.shape == (3,):
        return a.copy()
    raise ValidationError(f"cannot interpret {a.shape} as a symmetric 2x2 tensor")


# ---------------------------------------------------------------------------
# raster

@dataclass(frozen=True)
class Raster:
    """Regular grid of ``nx * ny`` cells with lower-left corner (x0, y0).

    Cell values are stored row-major, row ``iy`` at height ``y0 + (iy+1/2) dy``.
    Scalar potentials on a raster are samples at the cell centres.
    """
    nx: int
    ny: int
    x0: float
    y0: float
    dx: float
    dy: float

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1 or self.dx <= 0 or self.dy <= 0:
            raise ValidationError("raster needs positive sizes")

    @classmethod
    def square(cls, n, x0=0.0, y0=0.0, size=1.0):
        return cls(int(n), int(n), float(x0), float(y0), size / n, size / n)

    @property
    def shape(self):
        return (self.ny, self.nx)

    @property
    def size(self):
        return self.nx * self.ny

    @property
    def bounds(self):
        return (self.x0, self.y0, self.x0 + self.nx * self.dx, self.y0 + self.ny * self.dy)

    def centers(self):
        """Cell centres, shape (ny * nx, 2), row-major."""
        xs = self.x0 + (np.arange(self.nx) + 0.5) * self.dx
        ys = self.y0 + (np.arange(self.ny) + 0.5) * self.dy
        X, Y = np.meshgrid(xs, ys)
        return np.column_stack([X.ravel(), Y.ravel()])

    def cell_of(self, points, tol=1e-9):
        p = np.atleast_2d(np.asarray(points, dtype=float))
        fx = (p[:, 0] - self.x0) / self.dx
        fy = (p[:, 1] - self.y0) / self.dy
        if np.any(fx < -tol * self.nx) or np.any(fx > self.nx * (1 + tol)) or \
           np.any(fy < -tol * self.ny) or np.any(fy > self.ny * (1 + tol)):
            raise CarrierMismatch("point outside the raster")
        ix = np.clip(np.floor(fx).astype(int), 0, self.nx - 1)
        iy = np.clip(np.floor(fy).astype(int), 0, self.ny - 1)
        return iy * self.nx + ix

    def header(self):
        return ",".join([str(int(self.nx)), str(int(self.ny))] + [repr(float(x)) for x in (self.x0, self.y0, self.dx, self.dy)])

    @classmethod
    def from_header(cls, line):
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 6:
            raise ValidationError("raster header needs nx, ny, x0, y0, dx, dy")
        return cls(int(parts[0]), int(parts[1]), *map(float, parts[2:]))

    def refined(self, factor=2):
        return Raster(self.nx * factor, self.ny * factor, self.x0, self.y0,
                      self.dx / factor, self.dy / factor)

    def to_mesh(self, pattern="right"):
        """Triangle mesh with two triangles per raster cell."""
        from .mesh import square_mesh
        if self.nx != self.ny or not np.isclose(self.dx, self.dy):
            raise ValidationError("to_mesh needs a square raster")
        return square_mesh(self.nx, self.x0, self.y0, self.nx * self.dx, pattern)


# ---------------------------------------------------------------------------
# tensor fields

class TensorField:
    """Symmetric 2x2 tensor field on a mesh, raster, or analytic carrier."""

    kind = "tensor"

    def __init__(self, values=None, carrier=None, func=None):
        if func is None and carrier is None:
            values = _as_packed(values if values is not None else 1.0)
            const = values.copy()
            func = lambda p, c=const: np.broadcast_to(c, (len(np.atleast_2d(p)), 3)).copy()
            self.constant_value = const
        else:
            self.constant_value = None
        self.carrier = carrier
        self.func = func
        if carrier is not None:
            v = np.asarray(values, dtype=float)
            if v.ndim == 1:  # scalar isotropic per cell
                v = np.column_stack([v, np.zeros_like(v), v])
            elif v.ndim == 3:
                v = to_packed(v)
            n = carrier.n_triangles if isinstance(carrier, Mesh2D) else carrier.size
            if v.shape != (n, 3):
                raise CarrierMismatch(f"expected {n} cell values, got {v.shape}")
            if not np.all(np.isfinite(v)):
                raise ValidationError("non-finite tensor values")
            self.values = v
            self.values.setflags(write=False)
        else:
            self.values = None
        self._locator = None
        self._validate()

    def _validate(self):
        pass

    # constructors -----------------------------------------------------------
    @classmethod
    def constant(cls, value):
        return cls(value)

    @classmethod
    def from_function(cls, f):
        """``f(points) -> (n, 3)``, ``(n, 2, 2)`` or ``(n,)`` for isotropic."""
        def g(p):
            v = np.asarray(f(np.atleast_2d(p)), dtype=float)
            if v.ndim == 1:
                return np.column_stack([v, np.zeros_like(v), v])
            if v.ndim == 3:
                return to_packed(v)
            return v
        return cls(func=g)

    @classmethod
    def on_mesh(cls, mesh, values):
        return cls(values, carrier=mesh)

    @classmethod
    def on_raster(cls, raster, values):
        return cls(values, carrier=raster)

    def _like(self, values=None, carrier=None, func=None):
        return type(self)(values, carrier, func)

    # evaluation ---------------------------------------------------------------
    @property
    def is_isotropic(self):
        v = self.values if self.values is not None else self.constant_value
        if v is None:
            return False
        v = np.atleast_2d(v)
        return bool(np.all(v[:, 1] == 0) and np.all(v[:, 0] == v[:, 2]))

    def at(self, points):
        """Point values, (n, 3)."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        if self.carrier is None:
            return np.asarray(self.func(p), dtype=float).reshape(len(p), 3)
        if isinstance(self.carrier, Raster):
            return self.values[self.carrier.cell_of(p)]
        if self._locator is None:
            self._locator = TriangleLocator(self.carrier)
        try:
            tri, _ = self._locator.locate(p)
        except ValidationError as exc:
            raise CarrierMismatch(str(exc)) from None
        return self.values[tri]

    def on_triangles(self, mesh):
        """Per-triangle values on ``mesh``: the stored values when ``mesh`` is
        the carrier, else the mean over the 3-point sub-cell rule."""
        if isinstance(self.carrier, Mesh2D) and (
                self.carrier is mesh or (self.carrier.n_triangles == mesh.n_triangles
                                         and np.array_equal(self.carrier.triangles, mesh.triangles)
                                         and np.array_equal(self.carrier.vertices, mesh.vertices))):
            return np.array(self.values)
        if self.constant_value is not None:
            return np.tile(self.constant_value, (mesh.n_triangles, 1))
        p = mesh.vertices[mesh.triangles]  # (m, 3, 2)
        q = np.einsum("rs,msd->mrd", SUBCELL_BARY, p).reshape(-1, 2)
        return self.at(q).reshape(mesh.n_triangles, 3, 3).mean(axis=1)

    def cell_values(self):
        if self.values is None:
            raise ValidationError("analytic field has no cell values")
        return self.values

    def cell_points(self):
        """Representative point per stored cell (centroids / centres)."""
        if isinstance(self.carrier, Mesh2D):
            return self.carrier.centroids()
        if isinstance(self.carrier, Raster):
            return self.carrier.centers()
        raise ValidationError("analytic field has no cells")

    def eig_bounds(self, values=None):
        v = self.values if values is None else values
        if v is None:
            v = self.constant_value
        if v is None:
            return None
        e = eigvals_packed(v)
        return float(e[:, 0].min()), float(e[:, 1].max())

    def scaled(self, c):
        c = float(c)
        if self.carrier is not None:
            return self._like(self.values * c, self.carrier)
        if self.constant_value is not None:
            return self._like(self.constant_value * c)
        f = self.func
        return self._like(func=lambda p: c * f(p))

    def __repr__(self):
        where = type(self.carrier).__name__ if self.carrier is not None else (
            "constant" if self.constant_value is not None else "analytic")
        return f"{type(self).__name__}({where})"


class SigmaField(TensorField):
    """Conductivity tensor; uniformly elliptic."""

    kind = "sigma"

    def _validate(self):
        self.bounds = self.eig_bounds()
        if self.bounds is not None and self.bounds[0] <= 0:
            raise EllipticityViolation(f"conductivity not elliptic: min eigenvalue {self.bounds[0]:.3g}")

    def on_triangles(self, mesh):
        v = super().on_triangles(mesh)
        if self.bounds is None:
            lo = eigvals_packed(v)[:, 0].min()
            if lo <= 0:
                raise EllipticityViolation(f"conductivity not elliptic: min eigenvalue {lo:.3g}")
        return v


class QField(TensorField):
    """Divergence-free conductivity; positive-definite."""

    kind = "q"

    def __init__(self, values=None, carrier=None, func=None, divergence_residual=None):
        super().__init__(values, carrier, func)
        self.divergence_residual = divergence_residual

    def _validate(self):
        self.bounds = self.eig_bounds()
        if self.bounds is not None and self.bounds[0] <= 0:
            raise EllipticityViolation(f"Q not positive-definite: min eigenvalue {self.bounds[0]:.3g}")

    def det_bounds(self):
        v = self.values if self.values is not None else self.constant_value
        d = det_packed(v)
        return float(d.min()), float(d.max())


# ---------------------------------------------------------------------------
# scalar potential

def _fd_hessian_nodes(S, dx, dy, step=1):
    """Second differences of a node array ``S[iy, ix]``; second-order one-sided
    formulas at the edges.  Returns packed (ny, nx, 3)."""
    def d2(a, h, axis):
        a = np.moveaxis(a, axis, 0)
        n = a.shape[0]
        out = np.empty_like(a)
        st = step
        if n < 2 * st + 2:
            raise ValidationError("raster too small for second differences")
        out[st:n - st] = (a[2 * st:] - 2 * a[st:n - st] + a[:n - 2 * st]) / (st * h) ** 2
        for r in range(st):
            out[r] = (2 * a[r] - 5 * a[r + st] + 4 * a[r + 2 * st] - a[r + 3 * st]) / (st * h) ** 2
            m = n - 1 - r
            out[m] = (2 * a[m] - 5 * a[m - st] + 4 * a[m - 2 * st] - a[m - 3 * st]) / (st * h) ** 2
        return np.moveaxis(out, 0, axis)

    def d1(a, h, axis):
        a = np.moveaxis(a, axis, 0)
        n = a.shape[0]
        st = step
        out = np.empty_like(a)
        out[st:n - st] = (a[2 * st:] - a[:n - 2 * st]) / (2 * st * h)
        for r in range(st):
            out[r] = (-3 * a[r] + 4 * a[r + st] - a[r + 2 * st]) / (2 * st * h)
            m = n - 1 - r
            out[m] = (3 * a[m] - 4 * a[m - st] + a[m - 2 * st]) / (2 * st * h)
        return np.moveaxis(out, 0, axis)

    sxx = d2(S, dx, 1)
    syy = d2(S, dy, 0)
    sxy = d1(d1(S, dy, 0), dx, 1)
    return np.stack([sxx, sxy, syy], axis=-1)


def _bilinear(values, raster, points):
    """Bilinear interpolation of centre samples with linear extrapolation in
    the outer half-cells."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    V = values.reshape(raster.ny, raster.nx, -1)
    fx = (p[:, 0] - raster.x0) / raster.dx - 0.5
    fy = (p[:, 1] - raster.y0) / raster.dy - 0.5
    lo_x, lo_y = -0.5 - 1e-9, -0.5 - 1e-9
    if np.any(fx < lo_x) or np.any(fx > raster.nx - 0.5 + 1e-9) or \
       np.any(fy < lo_y) or np.any(fy > raster.ny - 0.5 + 1e-9):
        raise CarrierMismatch("point outside the raster")
    ix = np.clip(np.floor(fx).astype(int), 0, raster.nx - 2)
    iy = np.clip(np.floor(fy).astype(int), 0, raster.ny - 2)
    tx = (fx - ix)[:, None]
    ty = (fy - iy)[:, None]
    return ((1 - tx) * (1 - ty) * V[iy, ix] + tx * (1 - ty) * V[iy, ix + 1]
            + (1 - tx) * ty * V[iy + 1, ix] + tx * ty * V[iy + 1, ix + 1])


class SField:
    """Convex scalar potential.

    ``kind`` is ``"analytic"`` (callables for value, gradient, Hessian),
    ``"raster"`` (samples at raster cell centres) or ``"mesh"`` (per-vertex
    values of a piecewise-linear interpolant).
    """

    def __init__(self, kind, f=None, grad=None, hess=None, raster=None, mesh=None,
                 values=None, fd_step=1):
        self.kind = kind
        self.f, self.grad, self.hess = f, grad, hess
        self.raster, self.mesh = raster, mesh
        self.fd_step = fd_step
        self._hess_nodes = None
        self._locator = None
        if values is not None:
            values = np.asarray(values, dtype=float).reshape(-1)
            values.setflags(write=False)
        self.data = values
        if kind == "raster" and (raster is None or values is None or len(values) != raster.size):
            raise ValidationError("raster SField needs one value per cell")
        if kind == "mesh" and (mesh is None or values is None or len(values) != mesh.n_vertices):
            raise ValidationError("mesh SField needs one value per vertex")
        if kind == "analytic" and f is None:
            raise ValidationError("analytic SField needs a callable")

    # constructors -------------------------------------------------------------
    @classmethod
    def analytic(cls, f, grad=None, hess=None):
        return cls("analytic", f=f, grad=grad, hess=hess)

    @classmethod
    def quadratic(cls, H, center=(0.0, 0.0)):
        """``s(x) = 1/2 (x-c)^T H (x-c)``."""
        H = np.asarray(H, dtype=float)
        c = np.asarray(center, dtype=float)
        Hp = to_packed(H)[0]
        return cls.analytic(
            lambda p: 0.5 * np.einsum("ni,ij,nj->n", np.atleast_2d(p) - c, H, np.atleast_2d(p) - c),
            lambda p: (np.atleast_2d(p) - c) @ H.T,
            lambda p: np.tile(Hp, (len(np.atleast_2d(p)), 1)))

    @classmethod
    def paraboloid(cls):
        return cls.quadratic(np.eye(2))

    @classmethod
    def on_raster(cls, raster, values, fd_step=1):
        return cls("raster", raster=raster, values=values, fd_step=fd_step)

    @classmethod
    def on_mesh(cls, mesh, values):
        return cls("mesh", mesh=mesh, values=values)

    # evaluation ---------------------------------------------------------------
    def values(self, points):
        p = np.atleast_2d(np.asarray(points, dtype=float))
        if self.kind == "analytic":
            return np.asarray(self.f(p), dtype=float).reshape(len(p))
        if self.kind == "raster":
            return _bilinear(self.data[:, None], self.raster, p)[:, 0]
        tri, bary = self._locate(p)
        return (self.data[self.mesh.triangles[tri]] * bary).sum(axis=1)

    __call__ = values

    def _locate(self, p):
        if self._locator is None:
            self._locator = TriangleLocator(self.mesh)
        return self._locator.locate(p)

    def _fd_scale(self):
        return 1e-4

    def gradient(self, points):
        p = np.atleast_2d(np.asarray(points, dtype=float))
        if self.kind == "analytic":
            if self.grad is not None:
                return np.asarray(self.grad(p), dtype=float).reshape(len(p), 2)
            h = self._fd_scale()
            ex = np.array([h, 0.0])
            ey = np.array([0.0, h])
            return np.column_stack([(self.values(p + ex) - self.values(p - ex)) / (2 * h),
                                    (self.values(p + ey) - self.values(p - ey)) / (2 * h)])
        if self.kind == "raster":
            r = self.raster
            S = self.data.reshape(r.ny, r.nx)
            gx = np.gradient(S, r.dx, axis=1, edge_order=2)
            gy = np.gradient(S, r.dy, axis=0, edge_order=2)
            return _bilinear(np.stack([gx.ravel(), gy.ravel()], 1), r, p)
        tri, _ = self._locate(p)
        g = self.mesh.gradients()[tri]  # (n, 3, 2)
        return np.einsum("nr,nrd->nd", self.data[self.mesh.triangles[tri]], g)

    def hessian(self, points):
        """Packed Hessians (sxx, sxy, syy) at points."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        if self.kind == "analytic":
            if self.hess is not None:
                v = np.asarray(self.hess(p), dtype=float)
                return to_packed(v) if v.ndim == 3 else v.reshape(len(p), 3)
            h = 1e-4
            ex = np.array([h, 0.0])
            ey = np.array([0.0, h])
            f = self.values
            sxx = (f(p + ex) - 2 * f(p) + f(p - ex)) / h ** 2
            syy = (f(p + ey) - 2 * f(p) + f(p - ey)) / h ** 2
            sxy = (f(p + ex + ey) - f(p + ex - ey) - f(p - ex + ey) + f(p - ex - ey)) / (4 * h * h)
            return np.column_stack([sxx, sxy, syy])
        if self.kind == "raster":
            if self._hess_nodes is None:
                r = self.raster
                H = _fd_hessian_nodes(self.data.reshape(r.ny, r.nx), r.dx, r.dy, self.fd_step)
                self._hess_nodes = H.reshape(-1, 3)
            return _bilinear(self._hess_nodes, self.raster, p)
        raise ValidationError("a piecewise-linear s has no pointwise Hessian; use the hinge formula")

    def raster_hessian(self):
        """Hessian at every raster centre (raster kind only)."""
        self.hessian(self.raster.centers()[:1])
        return self._hess_nodes.copy()

    def check_convex(self, points, slack=1e-9):
        H = self.hessian(points)
        lo = eigvals_packed(H)[:, 0]
        scale = max(1.0, float(np.abs(H).max()))
        if np.any(lo < -slack * scale):
            n = int(np.argmin(lo))
            raise ConvexityViolation(f"Hessian eigenvalue {lo[n]:.3g} at {np.atleast_2d(points)[n].tolist()}")

    def gauge_normalized(self, ref=None):
        """Copy with the affine part removed so that s = 0, grad s = 0 at ``ref``.

        The default reference is the lower-left raster centre / mesh vertex 0.
        Analytic fields are wrapped lazily.
        """
        if self.kind == "raster":
            ref = self.raster.centers()[0] if ref is None else np.asarray(ref, dtype=float)
            pts = self.raster.centers()
        elif self.kind == "mesh":
            ref = self.mesh.vertices[0] if ref is None else np.asarray(ref, dtype=float)
            pts = self.mesh.vertices
        else:
            ref = np.zeros(2) if ref is None else np.asarray(ref, dtype=float)
            s0 = float(self.values(ref)[0])
            g0 = self.gradient(ref)[0]
            base = self
            return SField.analytic(lambda p: base.values(p) - s0 - (np.atleast_2d(p) - ref) @ g0,
                                   lambda p: base.gradient(p) - g0,
                                   lambda p: base.hessian(p))
        s0 = float(self.values(ref)[0])
        g0 = self.gradient(ref)[0]
        v = self.data - s0 - (pts - ref) @ g0
        if self.kind == "raster":
            return SField.on_raster(self.raster, v, self.fd_step)
        return SField.on_mesh(self.mesh, v)

    def __repr__(self):
        return f"SField({self.kind})"


# ---------------------------------------------------------------------------
# diagnostics

def weak_divergence_residual(mesh, qvals):
    """max over interior hats phi and l in {e1, e2} of
    |int grad(phi)^T Q l| / ||grad phi||_L1 for piecewise-constant Q."""
    g = mesh.gradients()  # (m, 3, 2)
    a = mesh.areas()
    Q = to_matrix(qvals)
    flux = np.einsum("mrd,mdl->mrl", g, Q) * a[:, None, None]  # (m, 3, 2)
    n = mesh.n_vertices
    r = np.zeros((n, 2))
    np.add.at(r, mesh.triangles.ravel(), flux.reshape(-1, 2))
    norm = np.zeros(n)
    np.add.at(norm, mesh.triangles.ravel(), (np.linalg.norm(g, axis=2) * a[:, None]).ravel())
    inner = mesh.interior_vertex & ~mesh.ghost
    if not inner.any():
        return 0.0
    return float((np.abs(r[inner]).max(axis=1) / norm[inner]).max())


def _vertex_recovery(mesh, vals):
    """Nodal values from per-triangle values by a linear least-squares fit
    to the centroid samples of each vertex patch (one ring inside, two rings
    on the boundary, where a plain average is only first-order)."""
    import scipy.sparse as sp
    n, m = mesh.n_vertices, mesh.n_triangles
    VT = sp.csr_matrix((np.ones(3 * m), (mesh.triangles.ravel(), np.repeat(np.arange(m), 3))),
                       shape=(n, m))
    VT2 = ((VT @ VT.T) @ VT).tocsr()
    c = mesh.centroids()
    out = np.empty((n, vals.shape[1]))
    for v in range(n):
        src = VT2 if mesh.boundary_vertex[v] else VT
        tris = src.indices[src.indptr[v]:src.indptr[v + 1]]
        d = c[tris] - mesh.vertices[v]
        A = np.column_stack([np.ones(len(tris)), d])
        coef, _, rank, _ = np.linalg.lstsq(A, vals[tris], rcond=None)
        if rank < 3:
            w = mesh.areas()[tris]
            out[v] = w @ vals[tris] / w.sum()
        else:
            out[v] = coef[0]
    return out


def resample(mesh, vals, points, mode="linear"):
    """Evaluate a per-triangle field of ``mesh`` at points, either piecewise
    constant or through the area-weighted vertex recovery."""
    loc = TriangleLocator(mesh)
    tri, bary = loc.locate(points)
    if mode == "constant":
        return vals[tri]
    if mode != "linear":
        raise ValidationError(f"unknown resample mode {mode!r}")
    nodal = _vertex_recovery(mesh, vals)
    return np.einsum("nr,nrc->nc", bary, nodal[mesh.triangles[tri]])


# ---------------------------------------------------------------------------
# transforms

def _default_mesh(field, mesh):
    if mesh is not None:
        return mesh
    if isinstance(field.carrier, Mesh2D):
        return field.carrier
    if isinstance(field.carrier, Raster):
        return field.carrier.to_mesh()
    raise ValidationError("a solve mesh is required for analytic fields")


def sigma_to_q(sigma, mesh=None, resample_mode="linear", on_noninjective="raise"):
    """Push sigma forward by its harmonic coordinates.

    Returns ``(Q, F)``.  With ``resample_mode="image"`` Q is carried by the
    image triangulation F(mesh), where it is exact; otherwise it is sampled
    at the centroids of ``mesh`` through point location in the image mesh
    (``"constant"`` or ``"linear"`` vertex recovery).
    """
    from .fem import harmonic_coordinates
    if not isinstance(sigma, SigmaField):
        sigma = SigmaField(sigma) if not isinstance(sigma, TensorField) else SigmaField(
            sigma.values, sigma.carrier, sigma.func)
    mesh = _default_mesh(sigma, mesh)
    F = harmonic_coordinates(mesh, sigma, on_noninjective=on_noninjective)
    qimg = F.pushforward(sigma.on_triangles(mesh))
    if resample_mode == "image":
        image = F.image_mesh()
        res = weak_divergence_residual(image, qimg)
        return QField(qimg, image, divergence_residual=res), F
    vals = resample(F.image_mesh(), qimg, mesh.centroids(), resample_mode)
    res = weak_divergence_residual(mesh, vals)
    return QField(vals, mesh, divergence_residual=res), F


def q_to_sigma_isotropic(q, mesh=None, target=None, resample_mode="constant"):
    """Isotropic sigma with the same push-forward class as ``q``.

    Solves for G harmonic in Q / sqrt(det Q) on the Q carrier; sigma is
    sqrt(det Q) carried by the image triangulation G(mesh).  With ``target``
    the result is resampled onto that mesh.  Returns ``(sigma, G)``.
    """
    from .fem import harmonic_coordinates
    mesh = _default_mesh(q, mesh)
    qv = q.on_triangles(mesh)
    d = det_packed(qv)
    if np.any(d <= 0):
        raise EllipticityViolation("det Q must be positive")
    root = np.sqrt(d)
    G = harmonic_coordinates(mesh, TensorField(qv / root[:, None], mesh))
    image = G.image_mesh()
    if target is None:
        return SigmaField(root, image), G
    vals = resample(image, root[:, None], target.centroids(), resample_mode)[:, 0]
    return SigmaField(vals, target), G


def _raster_samples(q, raster):
    if raster is None:
        if not isinstance(q.carrier, Raster):
            raise ValidationError("q_to_s needs a raster carrier or an explicit raster")
        return q.carrier, np.asarray(q.values)
    return raster, q.at(raster.centers())


def q_to_s(q, raster=None, tol=5e-2, return_residual=False):
    """Potential s with Hess s = R^T Q R on a raster.

    Q is sampled at raster centres.  Stream functions h, k with
    Q = [[h_y, k_y], [-h_x, -k_x]] are integrated by the trapezoid rule up
    the left column and then along rows; s follows from grad s = (-k, h)
    along the bottom row and then up the columns.  The gauge is s = 0,
    grad s = 0 at the lower-left centre.  The loop-closure residual of h
    and k over every grid cell, relative to max|Q| times the cell
    perimeter, must stay below ``tol``.
    """
    raster, v = _raster_samples(q, raster)
    ny, nx = raster.ny, raster.nx
    if nx < 2 or ny < 2:
        raise ValidationError("raster too small")
    dx, dy = raster.dx, raster.dy
    a = v[:, 0].reshape(ny, nx)
    b = v[:, 1].reshape(ny, nx)
    c = v[:, 2].reshape(ny, nx)

    def cumtrap(f, h, axis):
        f = np.moveaxis(f, axis, 0)
        out = np.zeros_like(f)
        out[1:] = np.cumsum(0.5 * (f[1:] + f[:-1]) * h, axis=0)
        return np.moveaxis(out, 0, axis)

    def potential(fy, fx):
        # grad p = (fx, fy); left column first, then rows
        col = cumtrap(fy[:, :1], dy, 0)
        return col + cumtrap(fx, dx, 1)

    h = potential(a, -b)
    k = potential(b, -c)
    # s_x = -k, s_y = h: bottom row first, then columns
    s = cumtrap(-k[:1, :], dx, 1) + cumtrap(h, dy, 0)

    def closure(fy, fx):
        # trapezoid circulation of (fx, fy) around each cell of the sample grid
        bottom = 0.5 * (fx[:-1, :-1] + fx[:-1, 1:]) * dx
        top = 0.5 * (fx[1:, :-1] + fx[1:, 1:]) * dx
        left = 0.5 * (fy[:-1, :-1] + fy[1:, :-1]) * dy
        right = 0.5 * (fy[:-1, 1:] + fy[1:, 1:]) * dy
        return np.abs(bottom + right - top - left)

    scale = max(np.abs(v).max(), 1e-300) * 2 * (dx + dy)
    resid = float(max(closure(a, -b).max(), closure(b, -c).max()) / scale)
    if resid > tol:
        raise PathDependence(f"loop-closure residual {resid:.3g} exceeds {tol:.3g}")
    out = SField.on_raster(raster, s.ravel())
    out.closure_residual = resid
    return (out, resid) if return_residual else out


def s_to_q(s, raster=None, slack=1e-9):
    """Q = R Hess(s) R^T.

    Raster potentials give a raster QField from finite differences; analytic
    potentials give an analytic QField (or a raster one when ``raster`` is
    given).  Convexity is checked on every evaluated point.
    """
    if s.kind == "mesh":
        raise ValidationError("use the hinge formula or the quadratic stencil for s^h")
    if s.kind == "raster" and raster is None:
        H = s.raster_hessian()
        _check_hessian(H, s.raster.centers(), slack)
        return QField(rotate_hessian(H), s.raster)
    if raster is not None:
        pts = raster.centers()
        H = s.hessian(pts)
        _check_hessian(H, pts, slack)
        return QField(rotate_hessian(H), raster)

    def qfun(p):
        H = s.hessian(p)
        _check_hessian(H, p, slack)
        return rotate_hessian(H)
    # positive-definiteness of analytic Q is checked lazily on evaluation
    return QField(func=qfun)


def _check_hessian(H, pts, slack):
    lo = eigvals_packed(H)[:, 0]
    scale = max(1.0, float(np.abs(H).max()))
    if np.any(lo < -slack * scale):
        n = int(np.argmin(lo))
        raise ConvexityViolation(f"Hessian eigenvalue {lo[n]:.3g} at {np.atleast_2d(pts)[n].tolist()}")
    if np.any(lo <= 0):
        warnings.warn("s is only weakly convex somewhere; Q is singular there", RuntimeWarning)
