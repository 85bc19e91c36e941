"""Geometry on the unit round sphere: points, frames, polyline curves.

Points are plain ``(3,)`` or ``(n, 3)`` float arrays of unit norm.  Curves are
closed geodesic polylines: consecutive nodes are joined by the minor
great-circle arc between them.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

FOUR_PI = 4.0 * np.pi
TWO_PI = 2.0 * np.pi

MAX_NODE_GAP = 0.2
MIN_NODES = 16
DEFAULT_ANGLE_FLOOR = 1e-3


class NonSimpleCurveError(ValueError):
    """Raised when an operation needs a simple curve and gets a self-crossing one."""

    def __init__(self, message, crossings=()):
        super().__init__(message)
        self.crossings = list(crossings)


class IndistinctCurvesError(ValueError):
    pass


class CurveCollapsedError(ValueError):
    pass


class NearTangencyWarning(UserWarning):
    pass


def normalize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def cross(a, b):
    """Cross product over the last axis; cheaper than np.cross on small batches."""
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return np.stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-1)


def project_tangent(x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Component of ``v`` orthogonal to the unit vector ``x``."""
    return v - np.sum(v * x, axis=-1, keepdims=True) * x


def geodesic_distance(p, q) -> np.ndarray | float:
    """Round-sphere distance, in radians, between unit vectors."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    cross = np.linalg.norm(np.cross(p, q), axis=-1)
    dot = np.sum(p * q, axis=-1)
    d = np.arctan2(cross, dot)
    return float(d) if np.ndim(d) == 0 else d


def tangent_frame(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic orthonormal frame ``(b1, b2)`` of the tangent plane at ``x``.

    ``b1`` is Gram-Schmidt of the coordinate axis on which ``x`` has the
    smallest absolute component; ``b2 = x × b1`` so ``(b1, b2, x)`` is
    positively oriented.
    """
    x = np.asarray(x, dtype=float)
    flat = x.reshape(-1, 3)
    axis = np.argmin(np.abs(flat), axis=1)
    e = np.zeros_like(flat)
    e[np.arange(len(flat)), axis] = 1.0
    b1 = normalize(project_tangent(flat, e))
    b2 = np.cross(flat, b1)
    return b1.reshape(x.shape), b2.reshape(x.shape)


def exp_map(x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Point reached from ``x`` along the great circle with initial velocity ``v``."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    safe = np.where(n > 0, n, 1.0)
    out = np.cos(n) * x + np.sin(n) * v / safe
    return normalize(out)


def parallel_transport(y: np.ndarray, x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Transport ``w`` in T_y to T_x along the minor arc from ``y`` to ``x``."""
    wx = np.sum(w * x, axis=-1, keepdims=True)
    denom = 1.0 + np.sum(x * y, axis=-1, keepdims=True)
    return w - wx / denom * (x + y)


def slerp(a: np.ndarray, b: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Point at fraction ``t`` of the minor arc from ``a`` to ``b`` (broadcasting)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    t = np.asarray(t, dtype=float)[..., None]
    omega = np.atleast_1d(geodesic_distance(a, b))[..., None]
    small = omega < 1e-9
    s = np.where(small, 1.0, np.sin(omega))
    wa = np.where(small, 1.0 - t, np.sin((1.0 - t) * omega) / s)
    wb = np.where(small, t, np.sin(t * omega) / s)
    return normalize(wa * a + wb * b)


def great_circle(pole, n_nodes: int = 256, start=None) -> np.ndarray:
    """Nodes of the great circle with the given pole, counterclockwise about it."""
    pole = normalize(pole)
    if start is None:
        b1, b2 = tangent_frame(pole)
    else:
        b1 = normalize(project_tangent(pole, np.asarray(start, dtype=float)))
        b2 = np.cross(pole, b1)
    s = np.linspace(0.0, TWO_PI, n_nodes, endpoint=False)
    return np.cos(s)[:, None] * b1 + np.sin(s)[:, None] * b2


def latitude_circle(colatitude: float, n_nodes: int = 256, axis=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Small circle at the given colatitude, counterclockwise about ``axis``.

    The cap around ``axis`` lies on the left of the traversal.
    """
    axis = normalize(axis)
    b1, b2 = tangent_frame(axis)
    s = np.linspace(0.0, TWO_PI, n_nodes, endpoint=False)
    ring = np.cos(s)[:, None] * b1 + np.sin(s)[:, None] * b2
    return np.cos(colatitude) * axis + np.sin(colatitude) * ring


@dataclass(frozen=True)
class DomainAreaPair:
    left_area: float
    right_area: float

    @property
    def total(self) -> float:
        return self.left_area + self.right_area


@dataclass(frozen=True)
class IntersectionCount:
    count: int
    near_tangencies: int = 0
    min_angle: float = float("nan")

    @property
    def total(self) -> int:
        return self.count + self.near_tangencies


@dataclass(frozen=True, eq=False)
class SphereCurve:
    """Closed geodesic polyline on the unit sphere.

    ``orientation`` is +1 when the curve is traversed in node order and -1
    when traversed in reverse; :meth:`oriented_nodes` applies it.
    """

    nodes: np.ndarray
    closed: bool = True
    orientation: int = 1
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        nodes = normalize(np.asarray(self.nodes, dtype=float))
        if nodes.ndim != 2 or nodes.shape[1] != 3:
            raise ValueError("nodes must have shape (n, 3)")
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        if self.orientation not in (1, -1):
            raise ValueError("orientation must be +1 or -1")

    def validate(self, max_gap: float = MAX_NODE_GAP) -> "SphereCurve":
        if len(self.nodes) < MIN_NODES:
            raise ValueError(f"curve needs at least {MIN_NODES} nodes, got {len(self.nodes)}")
        gaps = self.arc_lengths()
        if gaps.max() > max_gap:
            raise ValueError(f"node gap {gaps.max():.3g} exceeds {max_gap}")
        return self

    def __len__(self):
        return len(self.nodes)

    def oriented_nodes(self) -> np.ndarray:
        return self.nodes if self.orientation == 1 else self.nodes[::-1]

    def reversed(self) -> "SphereCurve":
        return SphereCurve(self.nodes, self.closed, -self.orientation, dict(self.meta))

    def with_nodes(self, nodes) -> "SphereCurve":
        return SphereCurve(nodes, self.closed, self.orientation, dict(self.meta))

    def arc_lengths(self) -> np.ndarray:
        x = self.nodes
        nxt = np.roll(x, -1, axis=0) if self.closed else x[1:]
        return geodesic_distance(x[: len(nxt)], nxt)

    def length(self) -> float:
        return float(np.sum(self.arc_lengths()))

    def unit_tangents(self) -> np.ndarray:
        """Unit tangents at the nodes in the traversal direction (central differences)."""
        x = self.oriented_nodes()
        t = project_tangent(x, np.roll(x, -1, axis=0) - np.roll(x, 1, axis=0))
        return normalize(t)

    def curvature(self) -> np.ndarray:
        """Signed geodesic curvature at each node, positive when turning left."""
        x = self.oriented_nodes()
        kn = curvature_vectors(x)
        left = np.cross(x, self.unit_tangents())
        return np.sum(kn * left, axis=1)

    def to_dict(self) -> dict:
        return {
            "nodes": self.nodes.tolist(),
            "closed": bool(self.closed),
            "orientation": int(self.orientation),
        }

    @classmethod
    def from_dict(cls, data) -> "SphereCurve":
        if isinstance(data, list):
            return cls(np.asarray(data, dtype=float))
        return cls(
            np.asarray(data["nodes"], dtype=float),
            bool(data.get("closed", True)),
            int(data.get("orientation", 1)),
        )

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "SphereCurve":
        return cls.from_dict(json.loads(Path(path).read_text()))


def curvature_vectors(x: np.ndarray) -> np.ndarray:
    """Geodesic curvature vectors of closed polylines ``x`` of shape (..., n, 3).

    Uses the small circle through each node and its two neighbours: with
    ``m`` the unit normal of the plane through the three points and
    ``d = m·x``, the curvature vector is ``d (m - d x) / (1 - d²)``.
    """
    prev = np.roll(x, 1, axis=-2)
    nxt = np.roll(x, -1, axis=-2)
    m = np.cross(x - prev, nxt - x)
    m /= np.linalg.norm(m, axis=-1, keepdims=True)
    d = np.sum(m * x, axis=-1, keepdims=True)
    return d * (m - d * x) / (1.0 - d * d)


def _spherical_triangle_areas(a, b, c):
    """Signed areas (Van Oosterom-Strackee) of spherical triangles."""
    det = np.einsum("...i,...i->...", a, np.cross(b, c))
    den = 1.0 + np.sum(a * b, -1) + np.sum(b * c, -1) + np.sum(c * a, -1)
    return 2.0 * np.arctan2(det, den)


def _fan_left_area(x: np.ndarray, apex: np.ndarray) -> float:
    nxt = np.roll(x, -1, axis=0)
    total = float(np.sum(_spherical_triangle_areas(np.broadcast_to(apex, x.shape), x, nxt)))
    return total % FOUR_PI


def enclosed_area(curve: SphereCurve, check_simple: bool = True) -> DomainAreaPair:
    """Areas of the domains on the left and right of an oriented simple closed curve."""
    if check_simple:
        crossings = self_intersections(curve)
        if len(crossings):
            raise NonSimpleCurveError(
                f"curve has {len(crossings)} self-intersections", crossings
            )
    x = curve.oriented_nodes()
    apex = np.sum(np.cross(x, np.roll(x, -1, axis=0)), axis=0)
    if np.linalg.norm(apex) < 1e-12:
        apex = np.array([0.0, 0.0, 1.0])
    apex = normalize(apex)
    # The fan degenerates when a node sits antipodal to the apex.
    if np.max(-x @ apex) > 1.0 - 1e-6:
        apex = normalize(apex + np.array([1e-3, 2e-3, 3e-3]))
    left = _fan_left_area(x, apex)
    if left < 1e-14 or left > FOUR_PI - 1e-14:
        left = _fan_left_area(x, -apex)
    return DomainAreaPair(left, FOUR_PI - left)


def _arc_data(nodes: np.ndarray, closed: bool = True):
    a = nodes
    b = np.roll(nodes, -1, axis=0) if closed else nodes[1:]
    a = a[: len(b)]
    mid = normalize(a + b)
    half = 0.5 * geodesic_distance(a, b)
    return a, b, mid, half


def _arc_pair_crossings(a1, b1, a2, b2):
    """Vectorized crossing test for minor arcs (a1,b1) and (a2,b2).

    Returns ``(crosses, sin_angle)``.  Each arc is treated as half-open
    [a, b) so a crossing exactly at a shared node is counted once.
    """
    n1 = np.cross(a1, b1)
    n2 = np.cross(a2, b2)
    sa, sb = np.sum(n2 * a1, -1), np.sum(n2 * b1, -1)
    sc, sd = np.sum(n1 * a2, -1), np.sum(n1 * b2, -1)
    straddle1 = (sa >= 0) != (sb >= 0)
    straddle2 = (sc >= 0) != (sd >= 0)
    p1 = np.abs(sb)[..., None] * a1 + np.abs(sa)[..., None] * b1
    p2 = np.abs(sd)[..., None] * a2 + np.abs(sc)[..., None] * b2
    same_side = np.sum(p1 * p2, -1) > 0
    crosses = straddle1 & straddle2 & same_side
    norms = np.linalg.norm(n1, axis=-1) * np.linalg.norm(n2, axis=-1)
    sin_angle = np.linalg.norm(np.cross(n1, n2), axis=-1) / np.where(norms > 0, norms, 1.0)
    return crosses, sin_angle


def _candidate_pairs(mid_a, half_a, mid_b, half_b):
    radius = float(half_a.max() + half_b.max()) * 1.0001 + 1e-12
    ta = cKDTree(mid_a)
    tb = cKDTree(mid_b)
    pairs = ta.sparse_distance_matrix(tb, radius, output_type="ndarray")
    return pairs["i"].astype(int), pairs["j"].astype(int)


def crossing_points(a: SphereCurve, b: SphereCurve):
    """Arc index pairs where the polylines cross, with the crossing angle sine."""
    a1, b1, ma, ha = _arc_data(a.nodes, a.closed)
    a2, b2, mb, hb = _arc_data(b.nodes, b.closed)
    i, j = _candidate_pairs(ma, ha, mb, hb)
    if len(i) == 0:
        return i, j, np.zeros(0)
    crosses, sin_angle = _arc_pair_crossings(a1[i], b1[i], a2[j], b2[j])
    return i[crosses], j[crosses], sin_angle[crosses]


def count_transverse_intersections(
    a: SphereCurve,
    b: SphereCurve,
    angle_floor: float = DEFAULT_ANGLE_FLOOR,
    warn_threshold: int = 0,
) -> IntersectionCount:
    """Number of transverse crossings of two closed polylines.

    Crossings whose incidence angle is below ``angle_floor`` are returned
    separately as near-tangencies and are not counted.
    """
    if len(a.nodes) == len(b.nodes) and np.allclose(a.nodes, b.nodes, atol=1e-12):
        raise IndistinctCurvesError("indistinct curves")
    _, _, s = crossing_points(a, b)
    angles = np.arcsin(np.clip(s, 0.0, 1.0))
    near = int(np.sum(angles < angle_floor))
    if near > warn_threshold:
        warnings.warn(
            f"{near} near-tangent crossings below {angle_floor:g} rad", NearTangencyWarning
        )
    return IntersectionCount(
        int(len(s) - near), near, float(angles.min()) if len(angles) else float("nan")
    )


def self_intersections(curve: SphereCurve) -> np.ndarray:
    """Pairs (i, j) of non-adjacent arcs of ``curve`` that cross."""
    a, b, mid, half = _arc_data(curve.nodes, curve.closed)
    n = len(a)
    tree = cKDTree(mid)
    radius = 2.0 * float(half.max()) * 1.0001 + 1e-12
    pairs = tree.query_pairs(radius, output_type="ndarray")
    if len(pairs) == 0:
        return np.zeros((0, 2), dtype=int)
    i, j = pairs[:, 0], pairs[:, 1]
    gap = np.abs(i - j)
    keep = (gap > 1) & (gap < n - 1) if curve.closed else gap > 1
    i, j = i[keep], j[keep]
    crosses, _ = _arc_pair_crossings(a[i], b[i], a[j], b[j])
    return np.stack([i[crosses], j[crosses]], axis=1)


def is_simple(curve: SphereCurve) -> bool:
    return len(self_intersections(curve)) == 0


def great_circle_crossings(nodes: np.ndarray, poles: np.ndarray) -> np.ndarray:
    """Crossing counts of a closed polyline with each great circle in ``poles``.

    A minor arc meets a great circle at most once, so a count is the number
    of sign changes of ``pole · node`` around the polyline.
    """
    s = (nodes @ poles.T) >= 0
    return np.sum(s != np.roll(s, -1, axis=0), axis=0)


def reparametrize_constant_speed(
    curve: SphereCurve, n_nodes: int, method: str = "geodesic"
) -> SphereCurve:
    """Resample a closed curve at ``n_nodes`` points equally spaced in arclength.

    The first node and the traversal order are kept.  ``method='geodesic'``
    places nodes on the polyline itself; ``method='cubic'`` places them on a
    cubic Hermite interpolant through the nodes, which cuts fewer corners.
    """
    if not curve.closed:
        raise ValueError("curve must be closed")
    if len(curve.nodes) < MIN_NODES:
        raise ValueError(f"curve needs at least {MIN_NODES} nodes")
    if curve.length() < 1e-6:
        raise CurveCollapsedError("curve collapsed")
    new = resample_closed_batch(curve.nodes[None], n_nodes, method)[0]
    return curve.with_nodes(new)


def hausdorff_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric Hausdorff distance between node sets (chordal search, angular result)."""
    ta, tb = cKDTree(a), cKDTree(b)
    da, _ = tb.query(a)
    db, _ = ta.query(b)
    chord = max(da.max(), db.max())
    return float(2.0 * np.arcsin(min(chord / 2.0, 1.0)))


def _point_to_arcs(x, p, q):
    """Angular distance from each x to the minor arc p-q (all of shape (k, 3))."""
    n = np.cross(p, q)
    nn = np.linalg.norm(n, axis=1)
    ok = nn > 1e-15
    n = n / np.where(ok, nn, 1.0)[:, None]
    h = np.einsum("ij,ij->i", x, n)
    foot = x - h[:, None] * n
    inside = ok & (np.einsum("ij,ij->i", np.cross(p, foot), n) >= 0) & (np.einsum("ij,ij->i", np.cross(foot, q), n) >= 0)
    ends = np.minimum(geodesic_distance(x, p), geodesic_distance(x, q))
    return np.where(inside, np.abs(np.arcsin(np.clip(h, -1, 1))), ends)


def _directed_polyline_distance(a, b, tree_b=None):
    tree_b = cKDTree(b) if tree_b is None else tree_b
    _, j = tree_b.query(a)
    m = len(b)
    d1 = _point_to_arcs(a, b[(j - 1) % m], b[j])
    d2 = _point_to_arcs(a, b[j], b[(j + 1) % m])
    return float(np.max(np.minimum(d1, d2)))


def curve_hausdorff(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric Hausdorff distance between two closed polylines.

    Nodes of one curve are measured against the arcs of the other next to
    its nearest node, so the result does not depend on node spacing.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return max(_directed_polyline_distance(a, b), _directed_polyline_distance(b, a))


def curves_to_json(curves, path) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in curves]))


def curves_from_json(path) -> list[SphereCurve]:
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict) and "curves" in data:
        data = data["curves"]
    if isinstance(data, dict):
        return [SphereCurve.from_dict(data)]
    if data and isinstance(data[0], list) and len(data[0]) == 3 and np.isscalar(data[0][0]):
        return [SphereCurve.from_dict(data)]
    return [SphereCurve.from_dict(d) for d in data]


def resample_closed_batch(x: np.ndarray, n_out: int, method: str = "cubic") -> np.ndarray:
    """Uniform-arclength resampling of many closed polylines at once.

    ``x`` has shape (m, n, 3); the first node of every curve is kept.
    """
    m, n, _ = x.shape
    nxt = np.roll(x, -1, axis=1)
    gaps = geodesic_distance(x, nxt)
    cum = np.concatenate([np.zeros((m, 1)), np.cumsum(gaps, axis=1)], axis=1)
    total = cum[:, -1]
    targets = np.arange(n_out)[None, :] * (total / n_out)[:, None]
    # one global search over row-offset arclengths
    offset = (np.arange(m) * (total.max() * 2 + 1.0))[:, None]
    flat_cum = (cum[:, :-1] + offset).ravel()
    idx = np.searchsorted(flat_cum, (targets + offset).ravel(), side="right") - 1
    idx = (idx - (np.arange(m) * n).repeat(n_out)).reshape(m, n_out)
    idx = np.clip(idx, 0, n - 1)
    rows = np.arange(m)[:, None]
    h1 = gaps[rows, idx]
    t = np.where(h1 > 0, (targets - cum[rows, idx]) / np.where(h1 > 0, h1, 1.0), 0.0)
    p1 = x[rows, idx]
    p2 = x[rows, (idx + 1) % n]
    if method == "geodesic":
        out = slerp(p1, p2, t)
    elif method == "cubic":
        i0 = (idx - 1) % n
        p0 = x[rows, i0]
        p3 = x[rows, (idx + 2) % n]
        h0 = gaps[rows, i0][..., None]
        h2 = gaps[rows, (idx + 1) % n][..., None]
        hh = h1[..., None]
        m1 = ((p2 - p1) / hh * h0 + (p1 - p0) / h0 * hh) / (h0 + hh)
        m2 = ((p3 - p2) / h2 * hh + (p2 - p1) / hh * h2) / (hh + h2)
        tt = t[..., None]
        t2, t3 = tt * tt, tt * tt * tt
        out = normalize(
            (2 * t3 - 3 * t2 + 1) * p1
            + (t3 - 2 * t2 + tt) * hh * m1
            + (-2 * t3 + 3 * t2) * p2
            + (t3 - t2) * hh * m2
        )
    else:
        raise ValueError(f"unknown method {method!r}")
    out[:, 0] = x[:, 0]
    return out
