"""Co-geodesic flow of a Finsler metric: integration, closure, Zoll checks, Jacobi zeros.

Trajectories are integrated in batches with a vectorized Dormand-Prince 5(4)
scheme, each with its own step size.  After every step the position is put
back on the sphere and the covector on the unit co-sphere.  Where the metric
declares caps outside of which it is round, trajectories outside the caps
advance along great circles in closed form up to the next cap.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .finsler import FinslerMetric, sample_liouville
from .parallel import chunked_map
from .sphere import (
    TWO_PI,
    IndistinctCurvesError,
    NearTangencyWarning,
    SphereCurve,
    count_transverse_intersections,
    geodesic_distance,
    normalize,
    self_intersections,
)

# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


class StepSizeCollapse(RuntimeError):
    def __init__(self, message, location=None):
        super().__init__(message)
        self.location = location


@dataclass
class PhaseState:
    x: np.ndarray
    xi: np.ndarray

    def to_dict(self):
        return {"x": self.x.tolist(), "xi": self.xi.tolist()}


def renormalize(metric: FinslerMetric, x, xi):
    """Project onto the unit co-sphere bundle."""
    x = normalize(x)
    xi = xi - np.sum(xi * x, 1)[:, None] * x
    f = metric.dual_norm(x, xi)
    return x, xi / f[:, None]


def _rhs(metric, y):
    x = normalize(y[:, :3])
    xi = y[:, 3:] - np.sum(y[:, 3:] * x, 1)[:, None] * x
    xd, xid = metric.geodesic_rhs(x, xi)
    return np.concatenate([xd, xid], axis=1)


@dataclass
class Trajectory:
    """Knots of one integrated trajectory with cubic Hermite dense output."""

    s: np.ndarray
    y: np.ndarray
    dy: np.ndarray

    @property
    def length(self) -> float:
        return float(self.s[-1])

    def __call__(self, s):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        k = np.clip(np.searchsorted(self.s, s, side="right") - 1, 0, len(self.s) - 2)
        h = self.s[k + 1] - self.s[k]
        t = ((s - self.s[k]) / np.where(h > 0, h, 1.0))[:, None]
        h = h[:, None]
        y0, y1 = self.y[k], self.y[k + 1]
        d0, d1 = self.dy[k], self.dy[k + 1]
        t2, t3 = t * t, t * t * t
        y = (
            (2 * t3 - 3 * t2 + 1) * y0
            + (t3 - 2 * t2 + t) * h * d0
            + (-2 * t3 + 3 * t2) * y1
            + (t3 - t2) * h * d1
        )
        x = normalize(y[:, :3])
        xi = y[:, 3:] - np.sum(y[:, 3:] * x, 1)[:, None] * x
        return x, xi

    def positions(self, s):
        return self(s)[0]


def _outside_caps(caps, x, margin=1e-9):
    if caps is None:
        return np.zeros(len(x), dtype=bool)
    out = np.ones(len(x), dtype=bool)
    for c, cosr in caps:
        out &= x @ c < cosr - margin
    return out


def _next_cap_entry(caps, x, v, limit):
    """Arclength along the great circle (x, v) until it first enters a cap, capped at limit."""
    s_min = np.full(len(x), np.inf)
    for c, cosr in caps:
        a = x @ c
        b = v @ c
        r = np.hypot(a, b)
        hit = r > cosr
        phase = np.arctan2(b, a)
        delta = np.arccos(np.clip(cosr / np.where(hit, r, 1.0), -1.0, 1.0))
        # x(s).c = r cos(s - phase); entry when s - phase = -delta (mod 2 pi)
        s = np.mod(phase - delta, TWO_PI)
        s_min = np.where(hit, np.minimum(s_min, s), s_min)
    return np.minimum(s_min, limit)


def integrate(
    metric: FinslerMetric,
    x0,
    xi0,
    length,
    rtol: float | None = None,
    atol: float = 1e-12,
    h0: float = 0.02,
    h_max: float = 0.1,
    knot_spacing: float = 0.05,
    max_steps: int = 200_000,
) -> list[Trajectory]:
    """Integrate a batch of unit-co-sphere states for F-length ``length``.

    Returns one :class:`Trajectory` per start.  Raises
    :class:`StepSizeCollapse` if a step size falls below 1e-12.  ``rtol``
    defaults to the metric's ``integration_rtol``.
    """
    if rtol is None:
        rtol = getattr(metric, "integration_rtol", 1e-10)
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    xi0 = np.atleast_2d(np.asarray(xi0, dtype=float))
    n = len(x0)
    lengths = np.broadcast_to(np.asarray(length, dtype=float), (n,)).copy()
    x, xi = renormalize(metric, x0, xi0)
    y = np.concatenate([x, xi], 1)
    caps = metric.round_caps
    s = np.zeros(n)
    h = np.full(n, h0)
    dy = _rhs(metric, y)
    knots_s = [[0.0] for _ in range(n)]
    knots_y = [[y[i].copy()] for i in range(n)]
    knots_d = [[dy[i].copy()] for i in range(n)]
    active = lengths > 0
    steps = 0
    while np.any(active):
        steps += 1
        if steps > max_steps:
            raise StepSizeCollapse("step budget exhausted", y[active][0].tolist())
        idx = np.nonzero(active)[0]
        jump = np.zeros(n, dtype=bool)
        if caps is not None:
            jump[idx] = _outside_caps(caps, y[idx, :3])
        ji = np.nonzero(jump)[0]
        if len(ji):
            _great_circle_advance(
                ji, y, dy, s, lengths, caps, knot_spacing, knots_s, knots_y, knots_d
            )
        ri = np.nonzero(active & ~jump)[0]
        if len(ri):
            _rk_step(metric, ri, y, dy, s, h, lengths, rtol, atol, h_max, knots_s, knots_y, knots_d)
        active = s < lengths - 1e-14
    return [
        Trajectory(np.array(knots_s[i]), np.array(knots_y[i]), np.array(knots_d[i]))
        for i in range(n)
    ]


def _great_circle_advance(ji, y, dy, s, lengths, caps, spacing, ks, ky, kd):
    x = y[ji, :3]
    xi = y[ji, 3:]
    # outside the caps the metric is round, so xi is the unit velocity
    v = xi / np.linalg.norm(xi, axis=1)[:, None]
    remaining = lengths[ji] - s[ji]
    arc = _next_cap_entry(caps, x, v, remaining)
    for j, i in enumerate(ji):
        m = max(1, int(np.ceil(arc[j] / spacing)))
        ts = np.linspace(0.0, arc[j], m + 1)[1:]
        c, sn = np.cos(ts)[:, None], np.sin(ts)[:, None]
        px = c * x[j] + sn * v[j]
        pv = -sn * x[j] + c * v[j]
        yy = np.concatenate([px, pv], 1)
        dd = np.concatenate([pv, -px], 1)
        ks[i].extend((s[i] + ts).tolist())
        ky[i].extend(yy)
        kd[i].extend(dd)
        y[i] = yy[-1]
        dy[i] = dd[-1]
        s[i] += arc[j]
    # land exactly on the end point when the arc ran to the requested length
    done = arc >= remaining
    s[ji[done]] = lengths[ji[done]]


def _rk_step(metric, ri, y, dy, s, h, lengths, rtol, atol, h_max, ks, ky, kd):
    yi = y[ri]
    hi = np.minimum(h[ri], lengths[ri] - s[ri])
    k = [dy[ri]]
    for stage in range(1, 7):
        acc = yi.copy()
        for j, a in enumerate(_A[stage]):
            if a != 0.0:
                acc += (hi * a)[:, None] * k[j]
        k.append(_rhs(metric, acc))
    y5 = yi + hi[:, None] * sum(b * kk for b, kk in zip(_B5, k) if b != 0.0)
    err = hi[:, None] * sum(e * kk for e, kk in zip(_E, k) if e != 0.0)
    scale = atol + rtol * np.maximum(np.abs(yi), np.abs(y5))
    en = np.sqrt(np.mean((err / scale) ** 2, axis=1))
    accept = en <= 1.0
    fac = np.clip(0.9 * np.where(en > 0, en, 1e-10) ** (-0.2), 0.2, 5.0)
    new_h = np.minimum(hi * fac, h_max)
    if np.any(new_h < 1e-12):
        bad = ri[np.argmin(new_h)]
        raise StepSizeCollapse("step size collapsed", y[bad, :3].tolist())
    acc_i = ri[accept]
    if len(acc_i):
        ya = y5[accept]
        x, xi = renormalize(metric, ya[:, :3], ya[:, 3:])
        ya = np.concatenate([x, xi], 1)
        d_new = _rhs(metric, ya)
        s[acc_i] += hi[accept]
        y[acc_i] = ya
        dy[acc_i] = d_new
        for j, i in enumerate(acc_i):
            ks[i].append(float(s[i]))
            ky[i].append(ya[j])
            kd[i].append(d_new[j])
    h[ri] = np.where(accept, new_h, np.minimum(new_h, hi))


# -- closure ---------------------------------------------------------------------


@dataclass
class GeodesicRecord:
    curve: SphereCurve | None
    period: float
    residual: float
    closed: bool
    simple: bool
    start: PhaseState
    trace: list = field(default_factory=list)

    def to_dict(self):
        return {
            "period": self.period,
            "residual": self.residual,
            "closed": self.closed,
            "simple": self.simple,
            "start": self.start.to_dict(),
            "curve": None if self.curve is None else self.curve.to_dict(),
        }


def phase_distance(x, xi, x0, xi0):
    return np.sqrt(geodesic_distance(x, x0) ** 2 + np.sum((xi - xi0) ** 2, axis=-1))


def _first_return(traj: Trajectory, x0, xi0, tol, min_length=0.5):
    """First local minimum of the return distance below tol after min_length."""
    s = traj.s
    grid = np.union1d(s, np.arange(min_length, traj.length, 0.01))
    grid = grid[grid >= min_length]
    x, xi = traj(grid)
    d = phase_distance(x, xi, x0, xi0)
    trace = d
    local = (d <= np.roll(d, 1)) & (d <= np.roll(d, -1))
    local[0] = local[-1] = False
    for k in np.nonzero(local & (d < max(tol, 0.05)))[0]:
        res = minimize_scalar(
            lambda t: float(np.sum(phase_distance(*traj(t), x0, xi0) ** 2)),
            bounds=(grid[k - 1], grid[k + 1]),
            method="bounded",
            options={"xatol": 1e-10},
        )
        dist = float(np.sqrt(max(res.fun, 0.0)))
        if dist < tol:
            return float(res.x), dist, trace
    return None, float(np.min(d)) if len(d) else np.inf, trace


def detect_closure_batch(
    metric: FinslerMetric,
    x0,
    xi0,
    max_length: float = 10 * np.pi,
    tol: float = 1e-3,
    n_nodes: int = 512,
    expected: float = TWO_PI,
    rtol: float | None = None,
) -> list[GeodesicRecord]:
    """Closure detection for a batch of starts.

    Integrates first to a little past ``expected``; starts that have not
    returned within ``tol`` are continued up to ``max_length``.
    """
    x0, xi0 = renormalize(metric, np.atleast_2d(x0), np.atleast_2d(xi0))
    n = len(x0)
    first = min(expected + 0.5, max_length)
    trajs = integrate(metric, x0, xi0, first, rtol=rtol)
    records: list[GeodesicRecord | None] = [None] * n
    retry = []
    for i, tr in enumerate(trajs):
        t, res, trace = _first_return(tr, x0[i], xi0[i], tol)
        if t is None:
            retry.append(i)
        else:
            records[i] = _make_record(tr, t, res, x0[i], xi0[i], n_nodes)
    if retry and max_length > first:
        more = integrate(metric, x0[retry], xi0[retry], max_length, rtol=rtol)
        for i, tr in zip(retry, more):
            t, res, trace = _first_return(tr, x0[i], xi0[i], tol)
            if t is None:
                records[i] = GeodesicRecord(
                    None, np.nan, res, False, False, PhaseState(x0[i], xi0[i]), _coarse(trace)
                )
            else:
                records[i] = _make_record(tr, t, res, x0[i], xi0[i], n_nodes)
    for i in retry:
        if records[i] is None:
            records[i] = GeodesicRecord(None, np.nan, np.inf, False, False, PhaseState(x0[i], xi0[i]))
    return records


def _coarse(trace, n=200):
    step = max(1, len(trace) // n)
    return [float(a) for a in trace[::step]]


def _make_record(traj, period, residual, x0, xi0, n_nodes):
    s = np.linspace(0.0, period, n_nodes, endpoint=False)
    nodes = traj.positions(s)
    curve = SphereCurve(nodes)
    simple = len(self_intersections(curve)) == 0
    return GeodesicRecord(curve, period, residual, True, simple, PhaseState(x0, xi0))


def detect_closure(metric, x0, xi0, max_length=10 * np.pi, tol=1e-3, n_nodes=512) -> GeodesicRecord:
    return detect_closure_batch(metric, x0, xi0, max_length, tol, n_nodes)[0]


# -- Zoll verification --------------------------------------------------------------


@dataclass
class ZollReport:
    n_samples: int
    periods: list
    max_period_deviation: float
    all_closed: bool
    all_simple: bool
    intersection_histogram: dict
    near_tangencies: int
    tol: float
    passed: bool
    witness: dict | None = None
    period_std: float = float("nan")

    def to_dict(self):
        d = dict(self.__dict__)
        d["intersection_histogram"] = {str(k): v for k, v in self.intersection_histogram.items()}
        return d


def pairwise_counts(curves, angle_floor: float = 1e-3):
    """Upper-triangular matrix of transverse crossing counts and the near-tangency total."""
    n = len(curves)
    counts = np.full((n, n), -1, dtype=int)
    near = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NearTangencyWarning)
        for i in range(n):
            for j in range(i + 1, n):
                try:
                    r = count_transverse_intersections(curves[i], curves[j], angle_floor)
                except IndistinctCurvesError:
                    continue
                counts[i, j] = counts[j, i] = r.count
                near += r.near_tangencies
    return counts, near


def _closure_chunk(args):
    metric, x0, xi0, max_length, tol, n_nodes = args
    return detect_closure_batch(metric, x0, xi0, max_length, tol, n_nodes)


def closed_geodesics(metric, x0, xi0, max_length, tol, n_nodes, workers=None, batch: int = 16):
    """Closure detection over many starts, split into batches for the worker pool."""
    jobs = [
        (metric, x0[i : i + batch], xi0[i : i + batch], max_length, tol, n_nodes)
        for i in range(0, len(x0), batch)
    ]
    return chunked_map(_closure_jobs, jobs, workers)


def _closure_jobs(jobs):
    return [r for j in jobs for r in _closure_chunk(j)]


def verify_zoll(
    metric: FinslerMetric,
    n_samples: int = 64,
    tol: float = 5e-3,
    seed: int = 0,
    max_length: float = 10 * np.pi,
    closure_tol: float | None = None,
    n_nodes: int = 512,
    workers: int | None = None,
) -> ZollReport:
    """Check that geodesics from Liouville-sampled starts close up simply at length 2 pi
    and meet pairwise exactly twice."""
    closure_tol = max(tol, 1e-3) if closure_tol is None else closure_tol
    batch = sample_liouville(metric, n_samples, seed, equal_weights=True)
    records = closed_geodesics(metric, batch.base, batch.form, max_length, closure_tol, n_nodes, workers)
    periods = [r.period for r in records]
    all_closed = all(r.closed for r in records)
    witness = None
    if not all_closed:
        bad = next(r for r in records if not r.closed)
        witness = {"start": bad.start.to_dict(), "min_return_distance": bad.residual, "trace": bad.trace}
    curves = [r.curve for r in records if r.closed]
    all_simple = all(r.simple for r in records if r.closed) and all_closed
    counts, near = pairwise_counts(curves)
    iu = np.triu_indices(len(curves), 1)
    vals = counts[iu]
    hist = {int(k): int(v) for k, v in zip(*np.unique(vals, return_counts=True))}
    dev = float(np.nanmax(np.abs(np.array(periods) - TWO_PI))) if all_closed else float("inf")
    passed = bool(
        all_closed and all_simple and dev < tol and near == 0 and set(hist) <= {2}
    )
    std = float(np.std(periods)) if all_closed else float("nan")
    return ZollReport(n_samples, periods, dev, all_closed, all_simple, hist, near, tol, passed, witness, std)


# -- Jacobi fields ---------------------------------------------------------------------


class NonlinearPerturbationError(ValueError):
    pass


@dataclass
class JacobiReport:
    zeros: int
    simple: bool
    min_slope_ratio: float
    zero_locations: list

    def to_dict(self):
        return dict(self.__dict__)


def jacobi_zero_count(
    metric: FinslerMetric, x0, xi0, dv: float = 1e-4, period: float = TWO_PI, n: int = 4096
) -> JacobiReport:
    """Zeros of the normal part of the variation field of the geodesic from (x0, xi0).

    The variation moves the start point by ``dv`` along the unit normal while
    keeping the covector parallel; the normal separation of the two geodesics,
    divided by ``dv``, approximates the normal Jacobi field.
    """
    res = jacobi_zero_count_batch(metric, np.atleast_2d(x0), np.atleast_2d(xi0), dv, period, n)
    return res[0]


def jacobi_zero_count_batch(metric, x0, xi0, dv=1e-4, period=TWO_PI, n=4096):
    x0, xi0 = renormalize(metric, x0, xi0)
    fstar, u = metric.dual(x0, xi0)
    nrm = normalize(np.cross(x0, u))
    x1 = normalize(np.cos(dv) * x0 + np.sin(dv) * nrm)
    # parallel transport of xi along the short arc x0 -> x1
    xi1 = xi0 - np.sum(xi0 * x1, 1)[:, None] / (1 + np.sum(x0 * x1, 1))[:, None] * (x0 + x1)
    m = len(x0)
    trajs = integrate(metric, np.concatenate([x0, x1]), np.concatenate([xi0, xi1]), period)
    s = np.linspace(0.0, period, n, endpoint=False)
    reports = []
    for i in range(m):
        g, gxi = trajs[i](s)
        gt, _ = trajs[m + i](s)
        vel, _ = metric.geodesic_rhs(g, gxi)
        normal = normalize(np.cross(g, vel))
        y = np.sum((gt - g) * normal, 1) / dv
        if np.max(np.abs(y)) * dv > 1e-2:
            raise NonlinearPerturbationError("perturbation too large: separation beyond the linear regime")
        reports.append(_sign_changes(s, y, period))
    return reports


def _sign_changes(s, y, period) -> JacobiReport:
    """Zeros of a periodic sample y(s).  Samples below round-off are treated
    as zero and skipped, so a zero that lands on a grid point counts once."""
    ymax = np.max(np.abs(y))
    k = np.nonzero(np.abs(y) > 1e-9 * ymax)[0]
    if len(k) < 2:
        return JacobiReport(0, False, float("nan"), [])
    nxt = np.roll(k, -1)
    change = np.nonzero(np.sign(y[k]) != np.sign(y[nxt]))[0]
    a, b = k[change], nxt[change]
    ds = np.mod(s[b] - s[a], period)
    slope = np.abs(y[b] - y[a]) / ds
    ratio = float(np.min(slope) / ymax) if len(change) else float("nan")
    locs = [float(np.mod(s[i] + d * y[i] / (y[i] - y[j]), period)) for i, j, d in zip(a, b, ds)]
    return JacobiReport(int(len(change)), bool(ratio > 0.1), ratio, locs)


def straight_hausdorff_check(metric, x0, xi0, length=TWO_PI, n=2048):
    """Max round distance of a geodesic from the great circle of its initial velocity."""
    tr = integrate(metric, x0, xi0, length)[0]
    pts = tr.positions(np.linspace(0, length, n))
    x0 = normalize(np.asarray(x0, dtype=float))
    pole = normalize(np.cross(x0, np.asarray(xi0, dtype=float)))
    return float(np.max(np.abs(np.arcsin(np.clip(pts @ pole, -1, 1)))))
