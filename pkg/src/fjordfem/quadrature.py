"""Numerical integration rules on the reference triangle and the unit interval.

The reference triangle has vertices (0,0), (1,0), (0,1) and area 1/2.  Low
degrees use classical symmetric point sets; higher degrees fall back to a
collapsed Gauss-Legendre product (Duffy map), which has positive weights for
any requested degree.
"""

from functools import lru_cache

import numpy as np


def _gauss01(n):
    """n-point Gauss-Legendre rule on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def _collapsed_triangle(degree):
    # Duffy map (u, v) -> (u (1 - v), v); Jacobian (1 - v) raises the v-degree by one.
    nu = (degree + 2) // 2
    nv = (degree + 3) // 2
    xu, wu = _gauss01(nu)
    xv, wv = _gauss01(nv)
    U, V = np.meshgrid(xu, xv, indexing="ij")
    WU, WV = np.meshgrid(wu, wv, indexing="ij")
    pts = np.column_stack([(U * (1.0 - V)).ravel(), V.ravel()])
    wts = (WU * WV * (1.0 - V)).ravel()
    return pts, wts


@lru_cache(maxsize=None)
def triangle_rule(degree):
    """Return (points, weights) integrating polynomials up to `degree` exactly.

    Weights sum to the reference area 1/2.
    """
    degree = max(int(degree), 1)
    if degree == 1:
        pts = np.array([[1.0 / 3.0, 1.0 / 3.0]])
        wts = np.array([0.5])
    elif degree == 2:
        pts = np.array([[1 / 6, 1 / 6], [2 / 3, 1 / 6], [1 / 6, 2 / 3]])
        wts = np.full(3, 1.0 / 6.0)
    elif degree <= 4:
        # two symmetric orbits, all weights positive
        a1, b1, w1 = 0.816847572980459, 0.091576213509771, 0.109951743655322
        a2, b2, w2 = 0.108103018168070, 0.445948490915965, 0.223381589678011
        pts = np.array(
            [
                [b1, b1], [a1, b1], [b1, a1],
                [b2, b2], [a2, b2], [b2, a2],
            ]
        )
        wts = 0.5 * np.array([w1, w1, w1, w2, w2, w2])
    elif degree == 5:
        a1, b1, w1 = 0.797426985353087, 0.101286507323456, 0.125939180544827
        a2, b2, w2 = 0.059715871789770, 0.470142064105115, 0.132394152788506
        pts = np.array(
            [
                [1 / 3, 1 / 3],
                [b1, b1], [a1, b1], [b1, a1],
                [b2, b2], [a2, b2], [b2, a2],
            ]
        )
        wts = 0.5 * np.array([0.225, w1, w1, w1, w2, w2, w2])
    else:
        pts, wts = _collapsed_triangle(degree)
    pts = np.ascontiguousarray(pts, dtype=np.float64)
    wts = np.ascontiguousarray(wts, dtype=np.float64)
    pts.setflags(write=False)
    wts.setflags(write=False)
    return pts, wts


@lru_cache(maxsize=None)
def interval_rule(degree):
    """Gauss-Legendre rule on [0, 1] exact up to `degree`."""
    n = max((int(degree) + 2) // 2, 1)
    x, w = _gauss01(n)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def triangle_monomial_integral(a, b):
    """Exact integral of x^a y^b over the reference triangle."""
    from math import factorial

    return factorial(a) * factorial(b) / factorial(a + b + 2)
