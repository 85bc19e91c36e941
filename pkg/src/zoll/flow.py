"""Curve-shortening flow on the round sphere.

Nodes move by the discrete geodesic curvature vector with explicit Euler
steps of size safety * (min gap)^2 and are pushed back onto the sphere after
every step.  Every few steps the curve is resampled at uniform arclength;
as a shrinking curve loses length its node count is reduced so the gap, and
with it the step size, stays roughly constant.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .sphere import (
    TWO_PI,
    DomainAreaPair,
    SphereCurve,
    count_transverse_intersections,
    curvature_vectors,
    enclosed_area,
    geodesic_distance,
    normalize,
    resample_closed_batch,
    self_intersections,
)


class EmbeddingLostError(RuntimeError):
    """The discrete curve crossed itself: a numerical failure, never a result."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class AreaLawDegenerateError(ValueError):
    pass


class ExtinctionError(RuntimeError):
    pass


@dataclass
class FlowConfig:
    n_nodes: int = 512
    safety: float = 0.4
    redistribute_every: int = 10
    kappa_tol: float = 1e-3
    length_tol: float = 1e-3
    extinct_length: float = 0.05
    t_max: float = 20.0
    min_nodes: int = 64
    adapt_nodes: bool = True
    method: str = "cubic"
    check_embedded: bool = True

    def __post_init__(self):
        if self.n_nodes < 64:
            raise ValueError("node count must be at least 64")
        if not 0 < self.safety <= 0.5:
            raise ValueError("safety factor must lie in (0, 0.5]")
        if self.redistribute_every < 1:
            raise ValueError("redistribution cadence must be positive")
        for name in ("kappa_tol", "length_tol", "extinct_length", "t_max"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class FlowState:
    curve: SphereCurve
    t: float
    length: float
    areas: DomainAreaPair
    max_abs_curvature: float

    def row(self):
        return (self.t, self.length, self.areas.left_area, self.max_abs_curvature)


@dataclass
class FlowTrajectory:
    states: list = field(default_factory=list)
    status: str = "running"

    @property
    def times(self):
        return np.array([s.t for s in self.states])

    @property
    def lengths(self):
        return np.array([s.length for s in self.states])

    @property
    def left_areas(self):
        return np.array([s.areas.left_area for s in self.states])

    @property
    def max_kappa(self):
        return np.array([s.max_abs_curvature for s in self.states])

    @property
    def final(self) -> FlowState:
        return self.states[-1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "length", "left_area", "max_kappa"])
        for s in self.states:
            w.writerow([f"{v:.12g}" for v in s.row()])
        return buf.getvalue()


def signed_curvature(x: np.ndarray) -> np.ndarray:
    """Signed geodesic curvature of closed polylines (..., n, 3), positive turning left."""
    k = curvature_vectors(x)
    t = np.roll(x, -1, axis=-2) - np.roll(x, 1, axis=-2)
    left = np.cross(x, t)
    left /= np.linalg.norm(left, axis=-1, keepdims=True)
    return np.sum(k * left, axis=-1)


def _lengths(x):
    return np.sum(geodesic_distance(x, np.roll(x, -1, axis=-2)), axis=-1)


def _min_gap(x):
    return float(np.min(geodesic_distance(x, np.roll(x, -1, axis=-2))))


class CurveFlow:
    """Single-curve flow whose state can be advanced checkpoint by checkpoint."""

    def __init__(self, curve: SphereCurve, cfg: FlowConfig | None = None):
        self.cfg = cfg or FlowConfig()
        if len(self_intersections(curve)):
            raise ValueError("input curve is not simple")
        self.orientation = curve.orientation
        nodes = curve.oriented_nodes()
        self.x = resample_closed_batch(nodes[None], self.cfg.n_nodes, self.cfg.method)[0]
        self.gap0 = _lengths(self.x) / self.cfg.n_nodes
        self.t = 0.0
        self.steps = 0
        self.trajectory = FlowTrajectory()
        self._record()

    def curve(self) -> SphereCurve:
        return SphereCurve(self.x.copy())

    def _record(self):
        c = self.curve()
        if self.cfg.check_embedded:
            crossings = self_intersections(c)
            if len(crossings):
                raise EmbeddingLostError(
                    f"self-intersection at t={self.t:.6g}", {"t": self.t, "curve": c.to_dict()}
                )
        state = FlowState(
            c,
            self.t,
            c.length(),
            enclosed_area(c, check_simple=False),
            float(np.max(np.abs(signed_curvature(self.x)))),
        )
        self.trajectory.states.append(state)
        return state

    def _status(self, state: FlowState):
        cfg = self.cfg
        if state.length < cfg.extinct_length:
            return "extinct"
        if state.max_abs_curvature < cfg.kappa_tol and abs(state.length - TWO_PI) < cfg.length_tol:
            return "converged-to-equator"
        if self.t >= cfg.t_max - 1e-12:
            return "running"
        return None

    def advance(self, t_target: float | None = None) -> FlowTrajectory:
        """Flow until a stop condition or until ``t_target`` (state is kept for later calls)."""
        cfg = self.cfg
        t_end = cfg.t_max if t_target is None else min(t_target, cfg.t_max)
        state = self.trajectory.final
        status = self._status(state)
        if status in ("extinct", "converged-to-equator") and t_target is None:
            self.trajectory.status = status
            return self.trajectory
        if status == "extinct":
            self.trajectory.status = status
            return self.trajectory
        while self.t < t_end - 1e-14:
            dt = min(cfg.safety * _min_gap(self.x) ** 2, t_end - self.t)
            self.x = normalize(self.x + dt * curvature_vectors(self.x))
            self.t += dt
            self.steps += 1
            if self.steps % cfg.redistribute_every == 0 or self.t >= t_end - 1e-14:
                n = len(self.x)
                if cfg.adapt_nodes:
                    n = int(np.clip(round(_lengths(self.x) / self.gap0), cfg.min_nodes, cfg.n_nodes))
                self.x = resample_closed_batch(self.x[None], n, cfg.method)[0]
                state = self._record()
                status = self._status(state)
                if status == "extinct" or (status is not None and t_target is None):
                    self.trajectory.status = status
                    return self.trajectory
        self.trajectory.status = self._status(self.trajectory.final) or "running"
        return self.trajectory


def flow(c: SphereCurve, cfg: FlowConfig | None = None, t_stop: float | None = None) -> FlowTrajectory:
    """Flow a simple closed curve until it converges, goes extinct, or reaches t_stop / t_max."""
    return CurveFlow(c, cfg).advance(t_stop)


def area_law(a0: float, t):
    return (a0 - TWO_PI) * np.exp(t) + TWO_PI


def area_law_residual(traj: FlowTrajectory, min_area: float = 0.2, balance_tol: float = 1e-6) -> float:
    """Max relative deviation of the left area from (|D0| - 2 pi) e^t + 2 pi,
    over records whose smaller domain exceeds ``min_area``."""
    a = traj.left_areas
    t = traj.times
    if abs(a[0] - TWO_PI) < balance_tol:
        raise AreaLawDegenerateError("area law degenerate: balanced curve")
    law = area_law(a[0], t)
    small = np.minimum(a, 4 * np.pi - a)
    keep = small > min_area
    shrinking = np.where(a[0] < TWO_PI, law, 4 * np.pi - law)
    obs = np.where(a[0] < TWO_PI, a, 4 * np.pi - a)
    return float(np.max(np.abs(obs[keep] - shrinking[keep]) / shrinking[keep]))


def extinction_time(a0: float) -> float:
    """Extinction time predicted by the area law for a curve whose smaller side has area a0."""
    a0 = min(a0, 4 * np.pi - a0)
    return float(np.log(TWO_PI / (TWO_PI - a0)))


def balance_drift(traj: FlowTrajectory) -> float:
    return float(np.max(np.abs(traj.left_areas - TWO_PI)))


# -- families --------------------------------------------------------------------


@dataclass
class FamilyCheckpoint:
    t: float
    nodes: np.ndarray
    alive: np.ndarray
    lengths: np.ndarray
    left_areas: np.ndarray
    max_kappa: np.ndarray
    counts: np.ndarray | None = None

    def curves(self):
        return [SphereCurve(self.nodes[i]) if self.alive[i] else None for i in range(len(self.alive))]


class FamilyFlow:
    """Synchronous flow of many closed curves with a shared time grid.

    All curves carry the same node count.  Curves whose curvature is below
    ``freeze_tol`` everywhere are no longer stepped (their motion is below
    round-off); extinct curves are dropped from the stepping set.
    """

    def __init__(self, curves, cfg: FlowConfig | None = None, balanced: bool = False, freeze_tol: float = 1e-11):
        self.cfg = cfg or FlowConfig()
        nodes = np.stack(
            [
                resample_closed_batch(c.oriented_nodes()[None], self.cfg.n_nodes, self.cfg.method)[0]
                for c in curves
            ]
        )
        self.x = nodes
        self.t = 0.0
        self.steps = 0
        self.balanced = balanced
        self.freeze_tol = freeze_tol
        m = len(nodes)
        self.alive = np.ones(m, dtype=bool)
        self.moving = np.ones(m, dtype=bool)
        self._update_moving()

    def _update_moving(self):
        k = np.max(np.abs(signed_curvature(self.x)), axis=1)
        self.moving = self.alive & (k > self.freeze_tol)
        return k

    def advance(self, t_target: float, check_embedded: bool = True):
        cfg = self.cfg
        while self.t < t_target - 1e-14:
            idx = np.nonzero(self.moving)[0]
            if len(idx) == 0:
                self.t = t_target
                break
            xm = self.x[idx]
            dt = min(cfg.safety * _min_gap(xm) ** 2, t_target - self.t)
            xm = normalize(xm + dt * curvature_vectors(xm))
            self.t += dt
            self.steps += 1
            if self.steps % cfg.redistribute_every == 0 or self.t >= t_target - 1e-14:
                xm = resample_closed_batch(xm, cfg.n_nodes, cfg.method)
                lengths = _lengths(xm)
                dead = lengths < cfg.extinct_length
                if np.any(dead):
                    if self.balanced:
                        raise ExtinctionError(
                            f"member {idx[dead][0]} went extinct in a balanced family at t={self.t:.4g}"
                        )
                    self.alive[idx[dead]] = False
                self.x[idx] = xm
                self._update_moving()
            else:
                self.x[idx] = xm
        if check_embedded:
            for i in np.nonzero(self.alive)[0]:
                if len(self_intersections(SphereCurve(self.x[i]))):
                    raise EmbeddingLostError(
                        f"member {i} lost embeddedness at t={self.t:.6g}",
                        {"t": self.t, "member": int(i), "curve": SphereCurve(self.x[i]).to_dict()},
                    )
        return self.checkpoint()

    def checkpoint(self, with_counts: bool = False) -> FamilyCheckpoint:
        k = np.max(np.abs(signed_curvature(self.x)), axis=1)
        left = np.array(
            [enclosed_area(SphereCurve(self.x[i]), check_simple=False).left_area if a else 0.0 for i, a in enumerate(self.alive)]
        )
        cp = FamilyCheckpoint(self.t, self.x.copy(), self.alive.copy(), _lengths(self.x), left, k)
        if with_counts:
            cp.counts = intersection_matrix(cp.curves())
        return cp


def intersection_matrix(curves, angle_floor: float = 1e-3) -> np.ndarray:
    """Pairwise transverse crossing counts; extinct (None) curves count 0."""
    import warnings

    from .sphere import NearTangencyWarning

    m = len(curves)
    out = np.zeros((m, m), dtype=int)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NearTangencyWarning)
        for i in range(m):
            for j in range(i + 1, m):
                if curves[i] is None or curves[j] is None:
                    continue
                r = count_transverse_intersections(curves[i], curves[j], angle_floor)
                out[i, j] = out[j, i] = r.count + r.near_tangencies
    return out


@dataclass
class FamilyFlowResult:
    checkpoints: list
    counts: list
    monotone: bool

    def summary(self):
        return [
            {
                "t": cp.t,
                "alive": int(cp.alive.sum()),
                "max_kappa": float(np.max(cp.max_kappa[cp.alive])) if cp.alive.any() else 0.0,
                "count_histogram": _histogram(c),
            }
            for cp, c in zip(self.checkpoints, self.counts)
        ]


def _histogram(counts):
    iu = np.triu_indices(len(counts), 1)
    vals, n = np.unique(counts[iu], return_counts=True)
    return {str(int(v)): int(k) for v, k in zip(vals, n)}


def flow_family(curves, checkpoints, cfg: FlowConfig | None = None, balanced: bool = False) -> FamilyFlowResult:
    """Flow every curve to each checkpoint and record pairwise crossing counts.

    Counts must never increase from one checkpoint to the next; the result
    records whether they did not.  A balanced family raises on extinction.
    """
    cfg = cfg or FlowConfig(adapt_nodes=False)
    if balanced:
        for c in curves:
            a = enclosed_area(c).left_area
            if abs(a - TWO_PI) > 1e-3:
                raise ValueError(f"curve declared balanced has left area {a:.6f}")
    fam = FamilyFlow(curves, cfg, balanced)
    cps = [fam.checkpoint(with_counts=True)]
    for t in sorted(checkpoints):
        if t <= 0:
            continue
        fam.advance(t)
        cps.append(fam.checkpoint(with_counts=True))
    counts = [cp.counts for cp in cps]
    monotone = all(np.all(b <= a) for a, b in zip(counts, counts[1:]))
    return FamilyFlowResult(cps, counts, monotone)
