"""Weighted families of closed geodesics, Crofton lengths and metric reconstruction.

A family is a finite set of oriented closed curves with positive weights of
total mass 4 pi.  The length of a curve is a quarter of the weighted number
of crossings with the members.  Running this backwards on short probe
segments gives a Finsler metric whose length functional the family
reproduces.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.integrate import quad
from scipy.spatial import SphericalVoronoi, cKDTree

from .finsler import (
    ConvexityReport,
    FinslerMetric,
    RoundMetric,
    fibonacci_sphere,
    _as_batch,
    audit_quadratic_convexity,
    sample_liouville,
)
from .geodesics import detect_closure_batch, renormalize
from .sphere import (
    DEFAULT_ANGLE_FLOOR,
    FOUR_PI,
    TWO_PI,
    NearTangencyWarning,
    SphereCurve,
    resample_closed_batch,
    _arc_data,
    _arc_pair_crossings,
    cross,
    geodesic_distance,
    great_circle,
    is_simple,
    normalize,
    project_tangent,
    tangent_frame,
)

GOLDEN = (1 + 5**0.5) / 2
MASS_TOL = 1e-9


class NonGenericIncidenceError(ValueError):
    """The curve runs along a member for a whole arc."""


class InsufficientDensityError(ValueError):
    pass


class NotZollError(RuntimeError):
    def __init__(self, message, start=None):
        super().__init__(message)
        self.start = start


# -- families ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GeodesicFamily:
    """Weighted oriented closed curves.

    Members are stored either as an (m, n, 3) node array or, for exact
    great circles, as an (m, 3) array of poles (the member is traversed
    counterclockwise around its pole).  ``partner[i]`` is the index of the
    reversed copy of member i when the family contains one, else -1.
    """

    weights: np.ndarray
    lineage: np.ndarray
    nodes: np.ndarray | None = None
    poles: np.ndarray | None = None
    partner: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "lineage", np.asarray(self.lineage, dtype=int))
        if (self.nodes is None) == (self.poles is None):
            raise ValueError("give exactly one of nodes or poles")
        m = len(self.nodes) if self.nodes is not None else len(self.poles)
        if len(w) != m or len(self.lineage) != m:
            raise ValueError("weights and lineage must have one entry per member")
        if np.any(w <= 0):
            raise ValueError("member weights must be positive")
        if abs(w.sum() - FOUR_PI) > MASS_TOL:
            raise ValueError(f"total mass {w.sum():.12g} differs from 4 pi")
        if self.partner is None:
            object.__setattr__(self, "partner", np.full(m, -1))

    def __len__(self):
        return len(self.weights)

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())

    @property
    def great_circles(self) -> bool:
        return self.poles is not None

    def member_nodes(self, n_nodes: int = 128) -> np.ndarray:
        """(m, n, 3) node array; great circles are sampled uniformly."""
        if self.nodes is not None:
            return self.nodes
        p = self.poles
        b1, b2 = tangent_frame(p)
        s = np.linspace(0.0, TWO_PI, n_nodes, endpoint=False)
        return np.cos(s)[None, :, None] * b1[:, None, :] + np.sin(s)[None, :, None] * b2[:, None, :]

    def member(self, i: int, n_nodes: int = 256) -> SphereCurve:
        if self.nodes is not None:
            return SphereCurve(self.nodes[i], meta={"lineage": int(self.lineage[i])})
        return SphereCurve(great_circle(self.poles[i], n_nodes), meta={"lineage": int(self.lineage[i])})

    def curves(self, n_nodes: int = 256) -> list[SphereCurve]:
        return [self.member(i, n_nodes) for i in range(len(self))]

    def with_weights(self, w) -> "GeodesicFamily":
        return GeodesicFamily(w, self.lineage, self.nodes, self.poles, self.partner, dict(self.meta))

    def with_nodes(self, nodes, meta=None) -> "GeodesicFamily":
        m = dict(self.meta) if meta is None else meta
        return GeodesicFamily(self.weights, self.lineage, np.asarray(nodes), None, self.partner, m)

    def check_simple(self, sample: int | None = None, seed: int = 0) -> bool:
        idx = np.arange(len(self))
        if sample is not None and sample < len(self):
            idx = np.sort(np.random.default_rng(seed).choice(len(self), sample, replace=False))
        return all(is_simple(self.member(int(i))) for i in idx)

    # persistence

    def to_dict(self, n_nodes: int = 128) -> dict:
        nodes = self.member_nodes(n_nodes)
        members = [
            {
                "curve": {"nodes": nodes[i].tolist(), "closed": True},
                "weight": float(self.weights[i]),
                "lineage": int(self.lineage[i]),
            }
            for i in range(len(self))
        ]
        if self.great_circles:
            for m, p in zip(members, self.poles):
                m["pole"] = p.tolist()
        return {
            "members": members,
            "total_mass": self.total_mass,
            "partner": self.partner.tolist(),
            "meta": {k: v for k, v in self.meta.items() if not k.startswith("_")},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeodesicFamily":
        unknown = set(d) - {"members", "total_mass", "partner", "meta"}
        if unknown:
            raise ValueError(f"unknown family fields: {sorted(unknown)}")
        mem = d["members"]
        nodes = np.array([m["curve"]["nodes"] for m in mem], dtype=float)
        w = np.array([m["weight"] for m in mem], dtype=float)
        lin = np.array([m["lineage"] for m in mem], dtype=int)
        declared = float(d.get("total_mass", FOUR_PI))
        if abs(declared - FOUR_PI) > MASS_TOL:
            raise ValueError(f"declared total mass {declared} is not 4 pi")
        partner = np.array(d["partner"]) if "partner" in d else None
        if mem and all("pole" in m for m in mem):
            poles = np.array([m["pole"] for m in mem], dtype=float)
            return cls(w, lin, poles=normalize(poles), partner=partner, meta=d.get("meta", {}))
        return cls(w, lin, nodes=normalize(nodes), partner=partner, meta=d.get("meta", {}))

    def dump(self, path, n_nodes: int = 128) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(n_nodes)))
        return path

    @classmethod
    def load(cls, path) -> "GeodesicFamily":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _normalize_mass(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    return w * (FOUR_PI / w.sum())


def section_grid(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Symmetric Fibonacci grid on the section (s, a) in [0, 2pi) x (-1, 1).

    The second half mirrors the first under (s, a) -> (s + pi, -a).
    Returns s, a and the partner index of each point.
    """
    if n < 2 or n % 2:
        raise ValueError("deterministic families need an even member count")
    h = n // 2
    k = np.arange(h)
    a = (k + 0.5) / h
    s = TWO_PI * np.mod(k * GOLDEN, 1.0)
    partner = np.r_[k + h, k]
    return np.r_[s, np.mod(s + np.pi, TWO_PI)], np.r_[a, -a], partner


def _section_frame(pole):
    pole = normalize(np.asarray(pole, dtype=float))
    e1, e2 = tangent_frame(pole)
    return pole, e1, e2


def section_starts(metric: FinslerMetric, s, a, pole=(0.0, 0.0, 1.0)):
    """Unit covectors over the transversal great circle with pole ``pole``.

    At E(s) with unit tangent t the covector is a F(t) t + b pole with b > 0
    fixed by F* = 1, so ``a`` is the normalized value of the covector on t.
    Returns (x, xi, F(x, t)).
    """
    pole, e1, e2 = _section_frame(pole)
    s = np.asarray(s, dtype=float)
    a = np.asarray(a, dtype=float)
    x = np.cos(s)[:, None] * e1 + np.sin(s)[:, None] * e2
    t = -np.sin(s)[:, None] * e1 + np.cos(s)[:, None] * e2
    ft = metric.norm(x, t)
    c = (a * ft)[:, None] * t
    if isinstance(metric, RoundMetric):
        b = np.sqrt(np.clip(1.0 - a * a, 0.0, None))
        return x, c + b[:, None] * pole, ft
    up = np.broadcast_to(pole, x.shape)
    lo = np.zeros(len(a))
    hi = np.ones(len(a))
    for _ in range(60):
        f = metric.dual_norm(x, c + hi[:, None] * up)
        if np.all(f > 1):
            break
        hi = np.where(f > 1, hi, 2 * hi)
    for _ in range(55):
        mid = 0.5 * (lo + hi)
        f = metric.dual_norm(x, c + mid[:, None] * up)
        lo = np.where(f > 1, lo, mid)
        hi = np.where(f > 1, mid, hi)
    b = 0.5 * (lo + hi)
    return x, c + b[:, None] * up, ft


def _round_family(n, s, a, partner, pole):
    pole, e1, e2 = _section_frame(pole)
    t = -np.sin(s)[:, None] * e1 + np.cos(s)[:, None] * e2
    b = np.sqrt(1.0 - a * a)
    poles = a[:, None] * pole - b[:, None] * t
    return poles


def _upward_crossings(nodes, pole):
    h = nodes @ pole
    up = (h < 0) & (np.roll(h, -1, axis=-1) >= 0)
    return up.sum(axis=-1)


def family_from_metric(
    metric: FinslerMetric,
    n: int,
    seed: int | None = 0,
    mode: str = "deterministic",
    n_nodes: int = 128,
    closure_tol: float = 1e-3,
    batch: int = 256,
    pole=None,
) -> GeodesicFamily:
    """Closed geodesics of a Zoll metric with their share of the measure on the space of geodesics.

    ``mode="deterministic"`` places starts on a Fibonacci grid over a
    transversal great circle, where the measure is ds da times F(t);
    ``mode="monte-carlo"`` draws equal-weight Liouville samples.  Round
    metrics give exact great circles.
    """
    if n < 2:
        raise ValueError("family needs at least two members")
    if mode not in ("deterministic", "monte-carlo"):
        raise ValueError(f"unknown family mode {mode!r}")
    if pole is None:
        hint = getattr(metric, "transversal_hint", lambda: None)()
        pole = (0.0, 0.0, 1.0) if hint is None else hint
    pole = normalize(np.asarray(pole, dtype=float))
    meta = {"mode": mode, "metric": metric.describe(), "section_pole": pole.tolist(), "seed": seed}
    if mode == "deterministic":
        s, a, partner = section_grid(n)
        if isinstance(metric, RoundMetric):
            poles = _round_family(n, s, a, partner, pole)
            meta["section"] = {"size": n}
            return GeodesicFamily(np.full(n, FOUR_PI / n), np.arange(n), poles=poles, partner=partner, meta=meta)
        x0, xi0, ft = section_starts(metric, s, a, pole)
        nodes = _trace_members(metric, x0, xi0, n_nodes, closure_tol, batch)
        ups = np.maximum(_upward_crossings(nodes, pole), 1)
        w = _normalize_mass(ft / ups)
        meta["section"] = {"size": n}
        return GeodesicFamily(w, np.arange(n), nodes=nodes, partner=partner, meta=meta)
    lb = sample_liouville(metric, n, seed, equal_weights=True)
    if isinstance(metric, RoundMetric):
        poles = normalize(cross(lb.base, lb.form))
        return GeodesicFamily(np.full(n, FOUR_PI / n), np.arange(n), poles=poles, meta=meta)
    nodes = _trace_members(metric, lb.base, lb.form, n_nodes, closure_tol, batch)
    w = np.full(n, FOUR_PI / n)
    nodes, w, lineage = _merge_orbits(nodes, w)
    return GeodesicFamily(_normalize_mass(w), lineage, nodes=nodes, meta=meta)


def section_reference(fam: GeodesicFamily, n_nodes: int | None = None):
    """Round members on the section grid of ``fam``, aligned by lineage.

    Returns (poles or nodes, weights) matching the representation of
    ``fam``, or None when the family was not built on a section grid.
    """
    sec = fam.meta.get("section")
    pole = fam.meta.get("section_pole")
    if not sec or pole is None:
        return None
    size = int(sec["size"])
    lin = np.asarray(fam.lineage)
    if lin.min() < 0 or lin.max() >= size:
        return None
    s, a, partner = section_grid(size)
    w = np.full(len(lin), FOUR_PI / size)
    if fam.great_circles:
        return _round_family(size, s, a, partner, pole)[lin], w
    n_nodes = fam.nodes.shape[1] if n_nodes is None else n_nodes
    x0, xi0, _ = section_starts(RoundMetric(), s[lin], a[lin], pole)
    th = np.linspace(0.0, TWO_PI, n_nodes, endpoint=False)
    return np.cos(th)[None, :, None] * x0[:, None, :] + np.sin(th)[None, :, None] * xi0[:, None, :], w


def _trace_members(metric, x0, xi0, n_nodes, closure_tol, batch):
    x0, xi0 = renormalize(metric, x0, xi0)
    out = np.empty((len(x0), n_nodes, 3))
    for i in range(0, len(x0), batch):
        recs = detect_closure_batch(
            metric, x0[i : i + batch], xi0[i : i + batch], tol=closure_tol, n_nodes=n_nodes
        )
        for j, r in enumerate(recs):
            if not r.closed:
                raise NotZollError(
                    "metric is not Zoll at tolerance: geodesic did not close", r.start.to_dict()
                )
            out[i + j] = r.curve.nodes
    return out


def _merge_orbits(nodes, w, tol=1e-6):
    """Merge members that trace the same oriented orbit."""
    m = len(nodes)
    key = normalize(np.sum(cross(nodes, np.roll(nodes, -1, axis=1)), axis=1))
    tree = cKDTree(key)
    pairs = tree.query_pairs(1e-4, output_type="ndarray")
    parent = np.arange(m)
    for i, j in pairs:
        d = np.min(geodesic_distance(nodes[j][:, None, :], nodes[i][None, :, :]), axis=1).max()
        if d < tol:
            parent[j] = parent[i]
    keep = np.unique(parent)
    merged = np.bincount(parent, w, minlength=m)[keep]
    return nodes[keep], merged, keep


# -- Crofton length ---------------------------------------------------------------------


@dataclass
class CroftonCount:
    length: float
    crossings: np.ndarray
    near_tangencies: int

    def to_dict(self):
        return {"length": self.length, "near_tangencies": self.near_tangencies}


def _member_arc_index(fam: GeodesicFamily):
    cache = fam.meta.get("_arc_index")
    if cache is not None:
        return cache
    nodes = fam.nodes
    m, n, _ = nodes.shape
    a = nodes.reshape(-1, 3)
    b = np.roll(nodes, -1, axis=1).reshape(-1, 3)
    mid = normalize(a + b)
    half = 0.5 * geodesic_distance(a, b)
    idx = (cKDTree(mid), a, b, mid, float(half.max()), np.repeat(np.arange(m), n))
    fam.meta["_arc_index"] = idx
    return idx


def _excluded(fam, exclude):
    if exclude is None:
        return np.zeros(0, dtype=int)
    ex = {int(exclude)}
    p = int(fam.partner[int(exclude)])
    if p >= 0:
        ex.add(p)
    return np.array(sorted(ex))


def crofton_count(
    fam: GeodesicFamily,
    c: SphereCurve,
    exclude: int | None = None,
    angle_floor: float = DEFAULT_ANGLE_FLOOR,
    chunk: int = 8192,
) -> CroftonCount:
    """Weighted crossing count of ``c`` against the family.

    Crossings at incidence angle below ``angle_floor`` are returned as
    near-tangencies and not counted.  ``exclude`` drops a member and its
    reversed partner.
    """
    nodes = c.nodes
    if len(nodes) < 3:
        raise ValueError("curve needs at least three nodes")
    if fam.great_circles:
        counts, near = _great_circle_counts(fam.poles, c, angle_floor, chunk, _excluded(fam, exclude))
    else:
        counts, near = _polyline_counts(fam, c, angle_floor, _excluded(fam, exclude))
    ex = _excluded(fam, exclude)
    counts[ex] = 0
    length = 0.25 * float(np.dot(counts, fam.weights))
    return CroftonCount(length, counts, int(near))


def crofton_length(
    fam: GeodesicFamily,
    c: SphereCurve,
    exclude: int | None = None,
    angle_floor: float = DEFAULT_ANGLE_FLOOR,
) -> float:
    """A quarter of the weighted number of transverse crossings of ``c`` with the members."""
    res = crofton_count(fam, c, exclude, angle_floor)
    if res.near_tangencies:
        warnings.warn(f"{res.near_tangencies} near-tangent crossings not counted", NearTangencyWarning)
    return res.length


def _great_circle_counts(poles, c, angle_floor, chunk, excluded):
    a = c.nodes if c.closed else c.nodes[:-1]
    b = np.roll(c.nodes, -1, axis=0) if c.closed else c.nodes[1:]
    direction = normalize(project_tangent(a, b - a))
    m = len(poles)
    counts = np.zeros(m, dtype=np.int64)
    near = 0
    skip = np.zeros(m, dtype=bool)
    skip[excluded] = True
    for lo in range(0, m, chunk):
        p = poles[lo : lo + chunk]
        ha = a @ p.T
        hb = b @ p.T
        flat = (np.abs(ha) < 1e-13) & (np.abs(hb) < 1e-13) & ~skip[lo : lo + chunk]
        if flat.any():
            raise NonGenericIncidenceError("non-generic incidence: curve runs along a member")
        hit = (ha >= 0) != (hb >= 0)
        sin_angle = np.abs(direction @ p.T)
        small = hit & (sin_angle < np.sin(angle_floor))
        small[:, skip[lo : lo + chunk]] = False
        near += int(small.sum())
        counts[lo : lo + chunk] = np.sum(hit & ~small, axis=0)
    return counts, near


def _polyline_counts(fam, c, angle_floor, excluded):
    tree, ma, mb, _, mhalf, owner = _member_arc_index(fam)
    a1, b1, mid, half = _arc_data(c.nodes, c.closed)
    radius = 2 * np.sin(min(np.pi / 2, (float(half.max()) + mhalf) * 1.0001 + 1e-12) / 2)
    lists = tree.query_ball_point(mid, radius)
    lens = np.fromiter(map(len, lists), int, len(lists))
    counts = np.zeros(len(fam), dtype=np.int64)
    if lens.sum() == 0:
        return counts, 0
    j = np.concatenate([np.asarray(l, dtype=int) for l in lists])
    i = np.repeat(np.arange(len(lists)), lens)
    skip = np.zeros(len(fam), dtype=bool)
    skip[excluded] = True
    keep = ~skip[owner[j]]
    i, j = i[keep], j[keep]
    crosses, sin_angle = _arc_pair_crossings(a1[i], b1[i], ma[j], mb[j])
    # collinear overlapping arcs: a whole arc shared with a member
    n1 = cross(a1[i], b1[i])
    par = np.linalg.norm(cross(n1, cross(ma[j], mb[j])), axis=1) < 1e-14
    if par.any():
        on = (np.abs(np.sum(n1[par] * ma[j][par], 1)) < 1e-13) & (np.abs(np.sum(n1[par] * mb[j][par], 1)) < 1e-13)
        overlap = np.sum((a1[i][par] + b1[i][par]) * (ma[j][par] + mb[j][par]), 1) > 0
        if np.any(on & overlap):
            raise NonGenericIncidenceError("non-generic incidence: curve runs along a member")
    small = crosses & (sin_angle < np.sin(angle_floor))
    good = crosses & ~small
    counts += np.bincount(owner[j[good]], minlength=len(fam))
    return counts, int(small.sum())


# -- reconstruction ---------------------------------------------------------------------


@dataclass
class ReconstructionConfig:
    """Probe estimator settings.

    ``eps`` is the probe half-length.  In ``deterministic`` mode the probe
    count is averaged over probe positions with a Gaussian kernel of width
    ``sigma`` and over orientations with width ``eta``; the average has a
    closed form per member node so ``eps`` drops out.  ``monte-carlo``
    counts crossings of the literal probe segment.
    """

    eps: float = 0.02
    min_members: int = 50
    mode: str = "deterministic"
    sigma: float | None = None
    eta: float = 0.05
    modes: int = 10
    cutoff: float = 4.0
    order: int = 4
    control_variate: bool = True

    def __post_init__(self):
        if not 0.005 <= self.eps <= 0.05:
            raise ValueError("probe half-length must lie in [0.005, 0.05]")
        if self.mode not in ("deterministic", "monte-carlo"):
            raise ValueError(f"unknown reconstruction mode {self.mode!r}")
        if self.min_members < 1 or self.modes < 1 or self.eta <= 0:
            raise ValueError("invalid reconstruction settings")
        if self.order not in (2, 4):
            raise ValueError("kernel order must be 2 or 4")
        if self.sigma is not None and not 0 < self.sigma < 0.5:
            raise ValueError("kernel width must lie in (0, 0.5)")

    def kernel_width(self, n_members: int, referenced: bool = False) -> float:
        if self.sigma is not None:
            return self.sigma
        # a little over the mean spacing of n points on the sphere; against a
        # round reference the noise is confined to the deflected members and
        # a narrower kernel trades it for less bias
        scale = 0.4 if referenced else 1.1
        width = scale * np.sqrt(FOUR_PI / n_members)
        if referenced:
            # keep about 1.25 * min_members effective crossings under the kernel
            width = max(width, 1.25 * self.min_members / n_members)
        return float(np.clip(width, 0.02, 0.2))


def _densify(nodes, n_nodes):
    if nodes.shape[1] >= n_nodes or len(nodes) == 0:
        return nodes
    return resample_closed_batch(nodes, n_nodes)


class CroftonMetric(FinslerMetric):
    """Finsler metric whose length functional is the Crofton length of a family."""

    kind = "crofton"
    scan_size = 128
    # the estimator is smooth only at the kernel scale; tighter tolerances
    # just resolve its quadrature ripple
    integration_rtol = 1e-6

    def __init__(self, fam: GeodesicFamily, cfg: ReconstructionConfig | None = None, n_nodes: int = 256):
        self.family = fam
        self.cfg = cfg or ReconstructionConfig()
        if self.cfg.mode == "monte-carlo" and len(fam) < 1000:
            raise InsufficientDensityError("monte-carlo reconstruction needs at least 1000 members")
        nodes, w = self._sources(fam, n_nodes)
        self.sigma = self.cfg.kernel_width(len(fam), self._base > 0)
        self.smoothness = self.sigma
        nxt = np.roll(nodes, -1, axis=1)
        prv = np.roll(nodes, 1, axis=1)
        ds = 0.5 * (geodesic_distance(nodes, nxt) + geodesic_distance(nodes, prv))
        tan = normalize(project_tangent(nodes, nxt - prv))
        m, n, _ = nodes.shape
        self._y = nodes.reshape(-1, 3)
        self._t = tan.reshape(-1, 3)
        self._w = (w[:, None] * ds).reshape(-1)
        self._tree = cKDTree(self._y)
        # Gaussian components (coefficient, width); the fourth-order pair
        # 2 G(s) - G(sqrt 2 s) cancels the s^2 smoothing bias
        if self.cfg.order == 4:
            self._parts = ((2.0, self.sigma), (-1.0, math.sqrt(2) * self.sigma))
        else:
            self._parts = ((1.0, self.sigma),)
        r = self.cfg.cutoff * max(w for _, w in self._parts)
        self._chord = 2 * np.sin(r / 2)
        self._span = 1 - np.cos(r)
        self._u0 = (1 - np.cos(0.75 * r)) / self._span
        self._norms = [
            TWO_PI * quad(lambda q, w=w: self._gauss(1 - np.cos(q), w)[0] * np.sin(q), 0, r, limit=200)[0]
            for _, w in self._parts
        ]
        # line integral of the kernel across one member
        self._line = sum(coef / (math.sqrt(TWO_PI) * w) for coef, w in self._parts)
        k = np.arange(1, self.cfg.modes + 1)
        self._k = k
        self._damp = np.exp(-2 * k * k * self.cfg.eta**2) / (4 * k * k - 1)
        # bound the neighbour arrays to a few million entries
        expected = len(self._y) * (1 - np.cos(r)) / 2
        self._chunk = int(max(1, 2_000_000 // max(expected, 1.0)))
        self.audit = None

    def _sources(self, fam, n_nodes):
        """Weighted member nodes entering the kernel sums.

        With a section reference only members that differ from their round
        counterpart enter, together with that counterpart at negative weight;
        the round family's exact coefficients are added back as ``_base``.
        This cancels the kernel bias wherever the metric is round.
        """
        self._base = 0.0
        self.active = len(fam)
        ref = None
        if self.cfg.control_variate and self.cfg.mode == "deterministic":
            ref = section_reference(fam)
        if ref is None:
            return _densify(fam.member_nodes(n_nodes), n_nodes), fam.weights
        rkey, rw = ref
        key = fam.poles if fam.great_circles else fam.nodes
        gap = np.abs(key - rkey).reshape(len(fam), -1).max(axis=1)
        moved = (gap > 1e-9) | (np.abs(fam.weights - rw) > 1e-12 * rw)
        self._base = TWO_PI
        self.active = int(moved.sum())
        if fam.great_circles:
            mine = fam.member_nodes(n_nodes)[moved]
            b1, b2 = tangent_frame(rkey[moved])
            th = np.linspace(0.0, TWO_PI, n_nodes, endpoint=False)
            theirs = np.cos(th)[None, :, None] * b1[:, None, :] + np.sin(th)[None, :, None] * b2[:, None, :]
        else:
            # both sides go through the same resampling so its error cancels
            # on members that are nearly round
            mine = _densify(fam.nodes[moved], n_nodes)
            theirs = _densify(rkey[moved], n_nodes)
        if not moved.any():
            # a zero-weight member keeps the tree non-empty
            return fam.member_nodes(n_nodes)[:1], np.zeros(1)
        return np.concatenate([mine, theirs]), np.r_[fam.weights[moved], -rw[moved]]

    def _gauss(self, gap, width):
        """Unnormalized Gaussian in angle of gap = 1 - x.y, with its gap-derivative.

        It is rolled off to zero with a C2 step over the outer quarter of
        the support so the estimator stays smooth when member nodes enter
        or leave it.
        """
        gap = np.asarray(gap, dtype=float)
        g = np.exp(-gap / width**2)
        u = np.clip((gap / self._span - self._u0) / (1 - self._u0), 0.0, 1.0)
        taper = 1 - u**3 * (10 - 15 * u + 6 * u * u)
        dtaper = -30 * u * u * (1 - u) ** 2 / ((1 - self._u0) * self._span)
        return g * taper, g * (dtaper - taper / width**2)

    def _kernel(self, gap):
        k = np.zeros_like(gap, dtype=float)
        dk = np.zeros_like(k)
        for (coef, width), z in zip(self._parts, self._norms):
            g, dg = self._gauss(gap, width)
            k += coef * g / z
            dk += coef * dg / z
        return k, dk

    # fiber coefficients

    def coefficients(self, x, grad: bool = False):
        """Kernel sums at base points ``x``.

        Returns (A0, C, b1, b2, n_eff) and, with ``grad``, the derivatives
        (dA0, dC) of A0 and C along b1 and b2 (last axis).  The frame is
        carried along by tilting it back into the tangent plane, which is
        how the ambient extension of the norm moves a fixed vector.  The
        fiber norm in the frame (b1, b2) is
        f(th) = (1/4) [2 A0/pi - 4/pi sum_k damp_k Re(conj(C_k) e^{2ik th})].
        """
        x = normalize(_as_batch(x))
        n = len(x)
        if n > self._chunk:
            parts = [self.coefficients(x[i : i + self._chunk], grad) for i in range(0, n, self._chunk)]
            return tuple(np.concatenate(q) for q in zip(*parts))
        b1, b2 = tangent_frame(x)
        nk = len(self._k)
        A0 = np.zeros(n)
        C = np.zeros((n, nk), dtype=complex)
        dA0 = np.zeros((n, 2))
        dC = np.zeros((n, nk, 2), dtype=complex)
        lists = self._tree.query_ball_point(x, self._chord)
        lens = np.fromiter(map(len, lists), int, n)
        has = lens > 0
        A0 += self._base
        if not has.any():
            out = (A0, C, b1, b2, A0 / (self._line * self.family.weights.mean()))
            return out + (dA0, dC) if grad else out
        idx = np.concatenate([np.asarray(l, dtype=np.intp) for l in lists if len(l)])
        own = np.repeat(np.arange(n), lens)
        starts = np.r_[0, np.cumsum(lens[has])[:-1]]
        y = self._y[idx]
        t = self._t[idx]
        xo = x[own]
        B1 = b1[own]
        B2 = b2[own]
        c = np.einsum("ij,ij->i", y, xo)
        K, dK = self._kernel(1 - c)
        # d K / d x along e is -dK (y.e)
        dK = -dK
        sx = np.einsum("ij,ij->i", t, xo)
        xy = xo + y
        # member tangent transported from y to x along the short arc
        p = t - (sx / (1 + c))[:, None] * xy
        pb1 = np.einsum("ij,ij->i", p, B1)
        pb2 = np.einsum("ij,ij->i", p, B2)
        pn = np.hypot(pb1, pb2)
        z = (pb1 + 1j * pb2) / pn
        W = self._w[idx] * K
        cols = [W]
        if grad:
            px = np.einsum("ij,ij->i", p, xo)
            for e, (sel1, sel2) in ((B1, (1.0, 0.0)), (B2, (0.0, 1.0))):
                ye = np.einsum("ij,ij->i", y, e)
                te = np.einsum("ij,ij->i", t, e)
                dp = -(((te * (1 + c) - sx * ye) / (1 + c) ** 2)[:, None] * xy) - (sx / (1 + c))[:, None] * e
                num = (np.einsum("ij,ij->i", dp, B1) - sel1 * px) + 1j * (np.einsum("ij,ij->i", dp, B2) - sel2 * px)
                pdp = pb1 * num.real + pb2 * num.imag
                dz = num / pn - z * pdp / pn**2
                cols.append(self._w[idx] * dK * ye)
                cols.append(2 * W * dz / z)
        U = np.stack(cols, axis=1).astype(complex)
        red = np.add.reduceat(U, starts, axis=0)
        A0[has] += red[:, 0].real
        if grad:
            dA0[has, 0] = red[:, 1].real
            dA0[has, 1] = red[:, 3].real
        z2 = z * z
        zk = np.ones_like(z2)
        for j, k in enumerate(self._k):
            zk = zk * z2
            red = np.add.reduceat(zk[:, None] * U, starts, axis=0)
            C[has, j] = red[:, 0]
            if grad:
                dC[has, j, 0] = red[:, 1] + k * red[:, 2]
                dC[has, j, 1] = red[:, 3] + k * red[:, 4]
        # members effectively crossing a probe at x: the line integral of a
        # Gaussian of width w across one member is 1/(sqrt(2 pi) w)
        n_eff = A0 / (self._line * self.family.weights.mean())
        out = (A0, C, b1, b2, n_eff)
        return out + (dA0, dC) if grad else out

    def _fiber(self, A0, C, theta, order=0):
        """f and its theta-derivatives at angles ``theta`` (n, k)."""
        e = np.exp(2j * self._k[None, None, :] * theta[..., None])
        base = np.conj(C)[:, None, :] * e * self._damp
        f = 0.25 * (2 / np.pi * A0[:, None] - 4 / np.pi * base.real.sum(-1))
        if order == 0:
            return f
        d1 = -1 / np.pi * (base * (2j * self._k)).real.sum(-1)
        d2 = -1 / np.pi * (base * (-4.0 * self._k**2)).real.sum(-1)
        return f, d1, d2

    def _check_density(self, n_eff):
        low = n_eff < self.cfg.min_members
        if np.any(low):
            raise InsufficientDensityError(
                f"insufficient family density: {float(n_eff.min()):.1f} effective member crossings"
            )

    def _norm(self, x, v):
        x = _as_batch(x)
        v = _as_batch(v)
        x, v = np.broadcast_arrays(x, v)
        if self.cfg.mode == "monte-carlo":
            return self._probe_norm(x, v)
        ux, inv = np.unique(x, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        A0, C, b1, b2, n_eff = self.coefficients(ux)
        self._check_density(n_eff)
        th = np.arctan2(np.sum(v * b2[inv], 1), np.sum(v * b1[inv], 1))
        return np.linalg.norm(v, axis=1) * self._fiber(A0[inv], C[inv], th[:, None])[:, 0]

    def _probe_norm(self, x, v):
        """Literal probe: Crofton length of a short round segment through x along v."""
        eps = self.cfg.eps
        out = np.empty(len(x))
        for i in range(len(x)):
            speed = np.linalg.norm(v[i])
            if speed == 0:
                out[i] = 0.0
                continue
            d = normalize(project_tangent(x[i], v[i]))
            s = np.linspace(-eps, eps, 9)
            seg = np.cos(s)[:, None] * x[i] + np.sin(s)[:, None] * d
            res = crofton_count(self.family, SphereCurve(seg, closed=False))
            hits = int(res.crossings.sum())
            if hits < self.cfg.min_members:
                raise InsufficientDensityError(
                    f"insufficient family density: {hits} member crossings on the probe"
                )
            out[i] = speed * res.length / (2 * eps)
        return out

    def dual(self, x, xi, tol: float = 1e-13, max_iter: int = 12):
        if self.cfg.mode == "monte-carlo":
            return super().dual(x, xi)
        x = _as_batch(x)
        xi = _as_batch(xi)
        x, xi = np.broadcast_arrays(x, xi)
        A0, C, b1, b2, n_eff = self.coefficients(x)
        self._check_density(n_eff)
        return self._dual_from(A0, C, b1, b2, xi, tol, max_iter)

    def _dual_from(self, A0, C, b1, b2, xi, tol=1e-13, max_iter=12):
        p = np.sum(xi * b1, 1)
        q = np.sum(xi * b2, 1)
        grid = np.linspace(0, TWO_PI, self.scan_size, endpoint=False)
        f = self._fiber(A0, C, np.broadcast_to(grid, (len(p), len(grid))))
        r = (p[:, None] * np.cos(grid) + q[:, None] * np.sin(grid)) / f
        th = grid[np.argmax(r, axis=1)]
        cap = TWO_PI / self.scan_size
        for _ in range(max_iter):
            f, f1, f2 = self._fiber(A0, C, th[:, None], order=2)
            f, f1, f2 = f[:, 0], f1[:, 0], f2[:, 0]
            g = p * np.cos(th) + q * np.sin(th)
            g1 = -p * np.sin(th) + q * np.cos(th)
            g2 = -g
            # r = g / f
            r1 = (g1 * f - g * f1) / f**2
            r2 = (g2 * f - g * f2) / f**2 - 2 * f1 * r1 / f
            step = np.where(r2 < 0, -r1 / np.where(r2 < 0, r2, -1.0), np.sign(r1) * cap / 4)
            step = np.clip(step, -cap, cap)
            th = th + step
            if np.max(np.abs(step)) < tol:
                break
        e = np.cos(th)[:, None] * b1 + np.sin(th)[:, None] * b2
        f = self._fiber(A0, C, th[:, None])[:, 0]
        fstar = np.sum(xi * e, 1) / f
        return fstar, e / f[:, None]

    def geodesic_rhs(self, x, xi):
        if self.cfg.mode == "monte-carlo":
            return super().geodesic_rhs(x, xi)
        A0, C, b1, b2, n_eff, dA0, dC = self.coefficients(x, grad=True)
        self._check_density(n_eff)
        fstar, u = self._dual_from(A0, C, b1, b2, xi)
        v = fstar[:, None] * u
        th = np.arctan2(np.sum(v * b2, 1), np.sum(v * b1, 1))
        speed = np.linalg.norm(v, axis=1)
        # d(F^2/2) along b_i is F |v| (d_i f)(th)
        g = [fstar * speed * self._fiber(dA0[:, i], dC[:, :, i], th[:, None])[:, 0] for i in (0, 1)]
        grad = g[0][:, None] * b1 + g[1][:, None] * b2
        xidot = grad - np.sum(xi * v, 1)[:, None] * x
        return v, xidot

    def fiber_convexity_margin(self, x, n_dirs: int = 128) -> np.ndarray:
        """Minimum over directions of (f + f'') / f at each base point."""
        A0, C, *_ = self.coefficients(x)
        th = np.linspace(0, np.pi, n_dirs, endpoint=False)
        f, _, f2 = self._fiber(A0, C, np.broadcast_to(th, (len(A0), n_dirs)), order=2)
        return np.min((f + f2) / f, axis=1)

    def convexity_margins(self, n_points: int = 400, n_directions: int = 64, points=None):
        x = fibonacci_sphere(n_points) if points is None else _as_batch(points)
        m = self.fiber_convexity_margin(x, max(n_directions, 64))
        i = int(np.argmin(m))
        return ConvexityReport(float(m[i]), bool(m[i] > 0), x[i].tolist(), None, len(x), max(n_directions, 64))

    def describe(self):
        return {
            "kind": self.kind,
            "members": len(self.family),
            "mode": self.cfg.mode,
            "sigma": self.sigma,
            "eta": self.cfg.eta,
            "eps": self.cfg.eps,
        }


def pairwise_sample_counts(fam: GeodesicFamily, sample: int = 16, seed: int = 0) -> np.ndarray:
    """Crossing counts among a random sample of members.

    Pairs of a member with its reversed partner (the same curve) are set to
    -2; other indistinct pairs and the diagonal are -1.
    """
    from .geodesics import pairwise_counts

    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(fam), min(sample, len(fam)), replace=False))
    counts, _ = pairwise_counts([fam.member(int(i)) for i in idx])
    counts[fam.partner[idx][:, None] == idx[None, :]] = -2
    return counts


def reconstruct_metric(
    fam: GeodesicFamily, cfg: ReconstructionConfig | None = None, audit: bool = True
) -> CroftonMetric:
    """Finsler metric reproducing the family's Crofton lengths.

    With ``audit`` a sample of members is checked for pairwise double
    crossings and the result is convexity-audited on a coarse grid.
    """
    cfg = cfg or ReconstructionConfig()
    if abs(fam.total_mass - FOUR_PI) > MASS_TOL:
        raise ValueError("family mass must be 4 pi")
    metric = CroftonMetric(fam, cfg)
    if audit:
        counts = pairwise_sample_counts(fam)
        iu = np.triu_indices(len(counts), 1)
        bad = (counts[iu] != 2) & (counts[iu] != -2)
        if np.any(bad):
            raise ValueError("family members do not pairwise cross exactly twice")
        report = None
        if cfg.mode == "deterministic":
            report = audit_quadratic_convexity(metric, n_points=200)
        metric.audit = {"pairwise_sample": int(len(counts)), "convexity": report.to_dict() if report else None}
    return metric


# -- measures ---------------------------------------------------------------------------


def interpolate_measure(fam1: GeodesicFamily, round_weights, tau: float) -> GeodesicFamily:
    """Weights (2 - tau) w(1) + (tau - 1) w(round) on the same members, tau in [1, 2]."""
    w0 = np.asarray(round_weights, dtype=float)
    if w0.shape != fam1.weights.shape:
        raise ValueError("weight vectors do not match the family members")
    if not 1.0 <= tau <= 2.0:
        raise ValueError("tau must lie in [1, 2]")
    if abs(w0.sum() - FOUR_PI) > MASS_TOL or np.any(w0 <= 0):
        raise ValueError("round weights must be positive with total 4 pi")
    if tau == 1.0:
        return fam1
    if tau == 2.0:
        return fam1.with_weights(w0)
    return fam1.with_weights(_normalize_mass((2 - tau) * fam1.weights + (tau - 1) * w0))


def round_voronoi_weights(poles) -> np.ndarray:
    """Round measure of oriented great circles restated on a finite set of poles.

    Each pole gets the area of its spherical Voronoi cell; the areas sum to 4 pi.
    """
    p = normalize(np.asarray(poles, dtype=float))
    sv = SphericalVoronoi(p, radius=1.0, threshold=1e-10)
    return _normalize_mass(sv.calculate_areas())


def best_fit_poles(nodes) -> np.ndarray:
    """Poles of the great circles closest to each member, oriented with the member."""
    nodes = np.asarray(nodes)
    cov = np.einsum("mni,mnj->mij", nodes, nodes)
    _, vecs = np.linalg.eigh(cov)
    pole = vecs[:, :, 0]
    area = np.sum(cross(nodes, np.roll(nodes, -1, axis=1)), axis=1)
    sign = np.sign(np.sum(area * pole, 1))
    return pole * np.where(sign == 0, 1.0, sign)[:, None]


@dataclass
class MemberLengths:
    """Crofton length of every member under its own family, with crossing statistics."""

    lengths: np.ndarray
    count_histogram: dict
    near_tangencies: int

    def deviation(self) -> float:
        return float(np.max(np.abs(self.lengths / TWO_PI - 1.0)))

    def to_dict(self) -> dict:
        return {
            "min": float(self.lengths.min()),
            "max": float(self.lengths.max()),
            "mean": float(self.lengths.mean()),
            "max_relative_deviation": self.deviation(),
            "count_histogram": self.count_histogram,
            "near_tangencies": self.near_tangencies,
        }


def member_crofton_lengths(
    fam: GeodesicFamily, angle_floor: float = DEFAULT_ANGLE_FLOOR, flat_tol: float = 1e-10, chunk: int = 16
) -> MemberLengths:
    """Crofton length of each member against the others (itself and its partner left out).

    Members that are great circles to ``flat_tol`` are counted by sign
    changes of the other members' heights over them; the rest go through
    the general polyline count.
    """
    m = len(fam)
    hist: dict[int, int] = {}
    near = 0
    lengths = np.empty(m)

    def tally(i, counts):
        skip = _excluded(fam, i)
        keep = np.ones(m, dtype=bool)
        keep[skip] = False
        vals, n = np.unique(counts[keep], return_counts=True)
        for v, k in zip(vals, n):
            hist[int(v)] = hist.get(int(v), 0) + int(k)
        counts = np.where(keep, counts, 0)
        lengths[i] = 0.25 * float(np.dot(counts, fam.weights))

    if fam.great_circles:
        p = fam.poles
        for lo in range(0, m, 512):
            dots = np.clip(p[lo : lo + 512] @ p.T, -1, 1)
            # two great circles cross at the angle between their poles
            sin_angle = np.sqrt(1 - dots * dots)
            for r in range(len(dots)):
                i = lo + r
                small = sin_angle[r] < np.sin(angle_floor)
                small[_excluded(fam, i)] = False
                near += int(small.sum())
                tally(i, np.where(small, 0, 2))
        return MemberLengths(lengths, {str(k): v for k, v in sorted(hist.items())}, near)

    nodes = fam.nodes
    n = nodes.shape[1]
    poles = best_fit_poles(nodes)
    flat = np.max(np.abs(np.einsum("mni,mi->mn", nodes, poles)), axis=1) < flat_tol
    flat_idx = np.nonzero(flat)[0]
    direction = normalize(project_tangent(nodes, np.roll(nodes, -1, axis=1) - nodes)).reshape(-1, 3)
    pts = nodes.reshape(-1, 3)
    sin_floor = np.sin(angle_floor)
    for lo in range(0, len(flat_idx), chunk):
        idx = flat_idx[lo : lo + chunk]
        h = (pts @ poles[idx].T).reshape(m, n, len(idx)) >= 0
        hit = h != np.roll(h, -1, axis=1)
        small = hit & (np.abs(direction @ poles[idx].T).reshape(m, n, len(idx)) < sin_floor)
        cnt = np.sum(hit & ~small, axis=1)
        nsm = np.sum(small, axis=1)
        for r, i in enumerate(idx):
            keep = np.ones(m, dtype=bool)
            keep[_excluded(fam, int(i))] = False
            near += int(nsm[keep, r].sum())
            tally(int(i), cnt[:, r])
    for i in np.nonzero(~flat)[0]:
        res = crofton_count(fam, fam.member(int(i)), exclude=int(i), angle_floor=angle_floor)
        near += res.near_tangencies
        tally(int(i), res.crossings)
    return MemberLengths(lengths, {str(k): v for k, v in sorted(hist.items())}, near)
