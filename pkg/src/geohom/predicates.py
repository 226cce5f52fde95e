"""Orientation predicates with an exact-arithmetic fallback.

Floating-point determinants are trusted when they clear a relative error
bound; the rest are recomputed with :class:`fractions.Fraction`, which is
exact for any finite double input.
"""
from fractions import Fraction

import numpy as np

# generous relative bound; Shewchuk's static bounds are ~1e-15
_FILTER = 1e-11


def _exact_orient2d(a, b, c):
    ax, ay = map(Fraction, a)
    bx, by = map(Fraction, b)
    cx, cy = map(Fraction, c)
    d = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
    return (d > 0) - (d < 0)


def _exact_lifted(a, b, c, d):
    ax, ay, ah = map(Fraction, a)
    rows = []
    for p in (b, c, d):
        px, py, ph = map(Fraction, p)
        rows.append((px - ax, py - ay, ph - ah))
    (a1, a2, a3), (b1, b2, b3), (c1, c2, c3) = rows
    det = a1 * (b2 * c3 - b3 * c2) - a2 * (b1 * c3 - b3 * c1) + a3 * (b1 * c2 - b2 * c1)
    return (det > 0) - (det < 0)


def orient2d(a, b, c):
    """Sign of the signed area of triangles (a, b, c); arrays of shape (n, 2)."""
    a, b, c = (np.atleast_2d(np.asarray(p, dtype=float)) for p in (a, b, c))
    u = b - a
    v = c - a
    t1 = u[:, 0] * v[:, 1]
    t2 = u[:, 1] * v[:, 0]
    det = t1 - t2
    perm = np.abs(t1) + np.abs(t2)
    sign = np.sign(det).astype(int)
    unsure = np.abs(det) <= _FILTER * perm
    for n in np.flatnonzero(unsure):
        sign[n] = _exact_orient2d(a[n], b[n], c[n])
    return sign


def lifted_orient(a, b, c, d):
    """Sign of det[b-a; c-a; d-a] for lifted points (x, y, h), shape (n, 3).

    For counter-clockwise (a, b, c) the result is +1 when the lifted point d
    lies above the plane through the other three, 0 when coplanar.
    """
    a, b, c, d = (np.atleast_2d(np.asarray(p, dtype=float)) for p in (a, b, c, d))
    r1, r2, r3 = b - a, c - a, d - a
    m1 = r2[:, 1] * r3[:, 2] - r2[:, 2] * r3[:, 1]
    m2 = r2[:, 0] * r3[:, 2] - r2[:, 2] * r3[:, 0]
    m3 = r2[:, 0] * r3[:, 1] - r2[:, 1] * r3[:, 0]
    det = r1[:, 0] * m1 - r1[:, 1] * m2 + r1[:, 2] * m3
    perm = (
        np.abs(r1[:, 0]) * (np.abs(r2[:, 1] * r3[:, 2]) + np.abs(r2[:, 2] * r3[:, 1]))
        + np.abs(r1[:, 1]) * (np.abs(r2[:, 0] * r3[:, 2]) + np.abs(r2[:, 2] * r3[:, 0]))
        + np.abs(r1[:, 2]) * (np.abs(r2[:, 0] * r3[:, 1]) + np.abs(r2[:, 1] * r3[:, 0]))
    )
    sign = np.sign(det).astype(int)
    unsure = np.abs(det) <= _FILTER * perm
    for n in np.flatnonzero(unsure):
        sign[n] = _exact_lifted(a[n], b[n], c[n], d[n])
    return sign
