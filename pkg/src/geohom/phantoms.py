"""Named test conductivities."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ValidationError
from .fields import SigmaField
from .mesh import Mesh2D

LAMINATE_LOW, LAMINATE_HIGH, LAMINATE_BACKGROUND = 0.05, 1.95, 1.0


@dataclass
class Phantom:
    name: str
    description: str
    sigma: SigmaField
    regions: dict = field(default_factory=dict)  # name -> indicator(points) -> bool array
    axis: float | None = None  # orientation (radians) of the homogenized major axis

    def region(self, name, points):
        return np.asarray(self.regions[name](np.asarray(points, float)), dtype=bool)


def _scalar(f: Callable) -> SigmaField:
    return SigmaField.from_function(lambda p: f(np.atleast_2d(np.asarray(p, float))))


def _in_circle(center, r):
    c = np.asarray(center, float)
    return lambda p: ((p - c) ** 2).sum(axis=1) <= r * r


def _in_box(x0, x1, y0, y1):
    return lambda p: (p[:, 0] >= x0) & (p[:, 0] <= x1) & (p[:, 1] >= y0) & (p[:, 1] <= y1)


def constant(value=1.0):
    return Phantom("constant", f"uniform conductivity {value}",
                   _scalar(lambda p: np.full(len(p), float(value))),
                   {"all": lambda p: np.ones(len(p), bool)})


def blob(background=1.0, circle=10.0, bar=5.0):
    """Background with a circular inclusion and a rectangular bar."""
    inc = _in_circle((-0.3, 0.3), 0.25)
    rect = _in_box(0.0, 0.6, -0.5, -0.25)

    def f(p):
        v = np.full(len(p), float(background))
        v[rect(p)] = bar
        v[inc(p)] = circle
        return v

    bg = lambda p: ~inc(p) & ~rect(p)  # noqa: E731
    return Phantom("blob", f"background {background}, circle {circle}, bar {bar}",
                   _scalar(f), {"circle": inc, "bar": rect, "background": bg})


def laminate(width=0.05, half=0.5, low=LAMINATE_LOW, high=LAMINATE_HIGH,
             background=LAMINATE_BACKGROUND):
    """Vertical stripes of alternating ``low``/``high`` in the square
    [-half, half]^2, ``background`` elsewhere.  The homogenized major axis
    runs along the stripes (vertical)."""
    box = _in_box(-half, half, -half, half)

    def f(p):
        v = np.full(len(p), float(background))
        m = box(p)
        k = np.floor((p[m, 0] + half) / width).astype(int)
        v[m] = np.where(k % 2 == 0, low, high)
        return v

    return Phantom("laminate", f"stripes {low}/{high} of width {width} in a square, background {background}",
                   _scalar(f), {"laminate": box, "background": lambda p: ~box(p)}, axis=np.pi / 2)


def checkerboard(a1=1.0, a2=4.0, period=1.0):
    def f(p):
        k = np.floor(p[:, 0] / (0.5 * period)) + np.floor(p[:, 1] / (0.5 * period))
        return np.where(k % 2 == 0, a1, a2)
    return Phantom("checkerboard", f"periodic checkerboard {a1}/{a2}", _scalar(f))


def two_phase_laminate(a1=1.0, a2=4.0, fraction=0.5, period=1.0):
    """Periodic laminate varying in x with volume fraction ``fraction`` of a1."""
    def f(p):
        t = np.mod(p[:, 0] / period, 1.0)
        return np.where(t < fraction, a1, a2)
    return Phantom("two-phase", f"periodic laminate {a1}/{a2}, fraction {fraction}", _scalar(f),
                   axis=np.pi / 2)


BUILTIN = {
    "constant": constant,
    "blob": blob,
    "laminate": laminate,
    "checkerboard": checkerboard,
    "two-phase": two_phase_laminate,
}


def get(name, **kw) -> Phantom:
    try:
        return BUILTIN[name](**kw)
    except KeyError:
        raise ValidationError(f"unknown phantom {name!r}; choose from {sorted(BUILTIN)}") from None


def graded_laminate(n=256, band=0.25, low=LAMINATE_LOW, high=LAMINATE_HIGH,
                    background=LAMINATE_BACKGROUND):
    """Laminate on the unit square with a mesh graded to its harmonic coordinates.

    ``n`` columns of equal width in harmonic coordinates; the outer ``band``
    fraction on each side holds ``background``, the rest alternates
    ``low``/``high`` one column at a time.  A column's physical width is
    proportional to its conductivity, so the harmonic map sends the
    tensor-product mesh almost onto the uniform n x n grid.  Returns
    ``(mesh, sigma_per_triangle, column_values)``.
    """
    if n < 4 or not 0 <= band < 0.5:
        raise ValidationError("need n >= 4 and 0 <= band < 0.5")
    cols = np.full(n, float(background))
    lo, hi = int(band * n), int((1 - band) * n)
    k = np.arange(lo, hi)
    cols[lo:hi] = np.where((k - lo) % 2 == 0, low, high)
    xs = np.concatenate([[0.0], np.cumsum(cols / cols.sum())])
    xs[-1] = 1.0
    ys = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(xs, ys)
    verts = np.column_stack([X.ravel(), Y.ravel()])
    r, c = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    a = (r * (n + 1) + c).ravel()
    tris = np.stack([np.column_stack([a, a + 1, a + n + 2]),
                     np.column_stack([a, a + n + 2, a + n + 1])], axis=1).reshape(-1, 3)
    sig = np.repeat(np.tile(cols, n), 2)
    return Mesh2D(verts, tris), sig, cols
