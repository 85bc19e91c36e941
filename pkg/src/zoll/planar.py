"""Centrally symmetric planar norms and their Mahler product."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class NonConvexNormError(ValueError):
    pass


@dataclass
class PlanarNorm:
    """A norm on R^2 given by its values on unit vectors.

    ``func`` takes an array of angles and returns N(cos t, sin t).
    """

    func: Callable[[np.ndarray], np.ndarray]

    def __call__(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        r = np.linalg.norm(v, axis=-1)
        return r * self.func(np.arctan2(v[..., 1], v[..., 0]))

    @classmethod
    def euclidean(cls):
        return cls(lambda t: np.ones_like(t))

    @classmethod
    def sup_norm(cls):
        return cls(lambda t: np.maximum(np.abs(np.cos(t)), np.abs(np.sin(t))))

    @classmethod
    def ellipse(cls, a: float, b: float):
        """Unit ball is the ellipse with semi-axes a and b."""
        return cls(lambda t: np.sqrt((np.cos(t) / a) ** 2 + (np.sin(t) / b) ** 2))

    @classmethod
    def from_samples(cls, values: np.ndarray):
        """Norm from values on an equispaced angle grid over [0, 2 pi), periodic linear interpolation
        of the radial function."""
        values = np.asarray(values, dtype=float)
        grid = np.linspace(0.0, 2 * np.pi, len(values), endpoint=False)

        def f(t):
            return 1.0 / np.interp(np.mod(t, 2 * np.pi), grid, 1.0 / values, period=2 * np.pi)

        return cls(f)

    def transformed(self, matrix) -> "PlanarNorm":
        """Norm whose unit ball is ``matrix`` applied to this one."""
        inv = np.linalg.inv(np.asarray(matrix, dtype=float))

        def f(t):
            u = np.stack([np.cos(t), np.sin(t)], -1) @ inv.T
            return self(u)

        return PlanarNorm(f)

    def is_symmetric(self, n: int = 256, tol: float = 1e-9) -> bool:
        t = np.linspace(0, 2 * np.pi, n, endpoint=False)
        return bool(np.allclose(self.func(t), self.func(t + np.pi), rtol=tol, atol=tol))


def _polygon_area(p: np.ndarray) -> float:
    q = np.roll(p, -1, axis=0)
    return 0.5 * float(np.sum(p[:, 0] * q[:, 1] - p[:, 1] * q[:, 0]))


def _turns(v: np.ndarray) -> np.ndarray:
    """Sine of the turning angle at each vertex of a closed polygon."""
    e = v - np.roll(v, 1, axis=0)
    f = np.roll(v, -1, axis=0) - v
    return (e[:, 0] * f[:, 1] - e[:, 1] * f[:, 0]) / (
        np.linalg.norm(e, axis=1) * np.linalg.norm(f, axis=1)
    )


def _recover_corners(v: np.ndarray, straight: float = 1e-9) -> np.ndarray:
    """Insert the corners of straight-edged bodies that fall between two rays.

    A corner hiding between samples k and k+1 shows up as two consecutive
    turning vertices flanked by straight ones; the corner is then the
    intersection of the edge through (k-1, k) with the edge through
    (k+1, k+2).  Smooth bodies turn at every vertex and are left alone.
    """
    n = len(v)
    flat = np.abs(_turns(v)) < straight
    idx = np.arange(n)
    hits = idx[flat[idx - 1] & ~flat & ~flat[(idx + 1) % n] & flat[(idx + 2) % n]]
    if len(hits) == 0:
        return v
    pieces, start = [], 0
    for k in hits:
        a0, a1 = v[k - 1], v[k]
        b0, b1 = v[(k + 1) % n], v[(k + 2) % n]
        m = np.array([a1 - a0, b0 - b1]).T
        if abs(np.linalg.det(m)) < 1e-14:
            continue
        s = np.linalg.solve(m, b0 - a1)[0]
        pieces.append(v[start : k + 1])
        pieces.append((a1 + s * (a1 - a0))[None])
        start = k + 1
    pieces.append(v[start:])
    return np.concatenate(pieces)


def _inscribed_and_polar(norm: PlanarNorm, n: int):
    t = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
    rho = 1.0 / norm.func(t)
    v = np.stack([rho * np.cos(t), rho * np.sin(t)], 1)
    v = _recover_corners(v)
    w = np.roll(v, -1, axis=0)
    # polar vertex of edge (v, w): the point y with y.v = y.w = 1
    det = v[:, 0] * w[:, 1] - v[:, 1] * w[:, 0]
    y = np.stack([(w[:, 1] - v[:, 1]) / det, (v[:, 0] - w[:, 0]) / det], 1)
    return v, y


def check_convex(norm: PlanarNorm, n: int = 4096, tol: float = 1e-12) -> float:
    """Smallest turning of the inscribed polygon; negative means a reflex vertex."""
    v, _ = _inscribed_and_polar(norm, n)
    e = np.roll(v, -1, axis=0) - v
    f = np.roll(e, -1, axis=0)
    turn = (e[:, 0] * f[:, 1] - e[:, 1] * f[:, 0]) / (
        np.linalg.norm(e, axis=1) * np.linalg.norm(f, axis=1)
    )
    return float(turn.min())


def mahler_product(norm: PlanarNorm, n: int = 4096, check: bool = True) -> float:
    """area(B) * area(B polar) for the unit ball B of a symmetric planar norm.

    B is approximated by the inscribed polygon on n equispaced rays and its
    exact polar polygon; the product converges like 1/n^2 for smooth bodies,
    so two Richardson steps over n, 2n, 4n remove the leading terms.
    Polygons whose vertices lie on the ray grid are reproduced exactly.
    """
    if n < 4096:
        raise ValueError("use at least 4096 rays")
    if check:
        if not norm.is_symmetric():
            raise NonConvexNormError("norm is not symmetric")
        if check_convex(norm, n) < -1e-12:
            raise NonConvexNormError("unit ball is not convex")
    vals = []
    for m in (n, 2 * n, 4 * n):
        v, y = _inscribed_and_polar(norm, m)
        vals.append(_polygon_area(v) * _polygon_area(y))
    a, b, c = vals
    r1 = (4 * b - a) / 3, (4 * c - b) / 3
    return float((16 * r1[1] - r1[0]) / 15)
