"""Deformation of a Zoll metric to the round metric through its geodesics.

The closed geodesics of the input metric are flowed by curve shortening
until they are great circles.  At each scheduled ``tau`` the flowed curves,
with the weights they inherited from the input's Crofton measure, define a
metric by reconstruction.  Once the curves are great circles the weights are
blended linearly into the round ones.  ``tau`` runs over [0, 2], with flow
time t = tau / (1 - tau) on [0, 1).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .crofton import (
    GeodesicFamily,
    ReconstructionConfig,
    best_fit_poles,
    family_from_metric,
    interpolate_measure,
    member_crofton_lengths,
    reconstruct_metric,
    round_voronoi_weights,
    section_reference,
    _normalize_mass,
)
from .finsler import FinslerMetric, curve_length, probe_grid
from .flow import ExtinctionError, FamilyFlow, FlowConfig, signed_curvature
from .geodesics import integrate, verify_zoll
from .sphere import (
    TWO_PI,
    SphereCurve,
    curve_hausdorff,
    enclosed_area,
    is_simple,
    normalize,
    project_tangent,
)


class RetractionError(RuntimeError):
    """Numerical abort; ``state`` holds what is needed to reproduce it."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state or {}


class UnbalancedFamilyError(ValueError):
    pass


class AntipodalAuditError(ValueError):
    pass


@dataclass(frozen=True)
class RetractionSchedule:
    taus: tuple = (0.0, 0.33, 0.67, 0.9, 1.0, 1.5, 2.0)
    kappa_tol: float = 1e-3
    t_max: float = 20.0

    def __post_init__(self):
        taus = tuple(float(t) for t in self.taus)
        object.__setattr__(self, "taus", taus)
        if len(taus) < 2 or taus[0] != 0.0 or taus[-1] != 2.0:
            raise ValueError("tau grid must start at 0 and end at 2")
        if any(b <= a for a, b in zip(taus, taus[1:])):
            raise ValueError("tau grid must be strictly increasing")
        if self.kappa_tol <= 0 or self.t_max <= 0:
            raise ValueError("convergence cutoff and flow-time guard must be positive")

    @classmethod
    def parse(cls, text: str, **kw) -> "RetractionSchedule":
        return cls(tuple(float(t) for t in text.split(",") if t.strip()), **kw)

    def flow_time(self, tau: float) -> float | None:
        """Flow time for tau < 1; None from tau = 1 on, where the cutoff takes over."""
        if tau < 1.0:
            return tau / (1.0 - tau)
        return None

    def to_dict(self) -> dict:
        return {"taus": list(self.taus), "kappa_tol": self.kappa_tol, "t_max": self.t_max}


@dataclass
class RetractionStep:
    tau: float
    flow_time: float
    family: GeodesicFamily
    metric: FinslerMetric
    report: dict = field(default_factory=dict)

    def row(self) -> dict:
        r = self.report
        hist = r.get("member_lengths", {}).get("count_histogram", {})
        worst = max((int(k) for k in hist), key=lambda k: abs(k - 2), default=2)
        return {
            "tau": self.tau,
            "flow_time": self.flow_time,
            "error_vs_round": r.get("error_vs_round", float("nan")),
            "error_vs_input": r.get("error_vs_input", float("nan")),
            "zoll_pass": bool(r.get("zoll", {}).get("passed", False)),
            "worst_intersection_count": worst,
            "mean_member_length": r.get("member_lengths", {}).get("mean", float("nan")),
        }


@dataclass
class RetractionResult:
    steps: list
    schedule: RetractionSchedule
    input_metric: FinslerMetric
    cutoff_time: float | None = None
    timings: dict = field(default_factory=dict)

    def step(self, tau: float) -> RetractionStep:
        for s in self.steps:
            if abs(s.tau - tau) < 1e-12:
                return s
        raise KeyError(f"no step at tau={tau}")

    def summary_rows(self) -> list[dict]:
        return [s.row() for s in self.steps]

    def to_dict(self) -> dict:
        return {
            "schedule": self.schedule.to_dict(),
            "input_metric": self.input_metric.describe(),
            "cutoff_time": self.cutoff_time,
            "steps": [{"tau": s.tau, "flow_time": s.flow_time, **s.report} for s in self.steps],
        }


def left_areas(fam: GeodesicFamily) -> np.ndarray:
    if fam.great_circles:
        return np.full(len(fam), TWO_PI)
    return np.array([enclosed_area(SphereCurve(x), check_simple=False).left_area for x in fam.nodes])


def check_balanced(fam: GeodesicFamily, tol: float = 1e-3) -> float:
    """Largest deviation of a member's left area from 2 pi; raises above ``tol``."""
    dev = float(np.max(np.abs(left_areas(fam) - TWO_PI)))
    if dev > tol:
        raise UnbalancedFamilyError(f"family is not balanced: a left area is off 2 pi by {dev:.3g}")
    return dev


def round_weights(fam: GeodesicFamily) -> np.ndarray:
    """Round measure on a great-circle family.

    Voronoi cells on the pole sphere give each member its share; when the
    family has a round section reference the cell areas are taken relative
    to the reference's cells, which keeps members that did not move at the
    reference's exact weight.
    """
    if not fam.great_circles:
        raise ValueError("round weights need a great-circle family")
    cells = round_voronoi_weights(fam.poles)
    ref = section_reference(fam)
    if ref is None:
        return cells
    ref_poles, ref_w = ref
    return _normalize_mass(ref_w * cells / round_voronoi_weights(ref_poles))


def _converge(flow: FamilyFlow, schedule: RetractionSchedule, dt: float = 0.5):
    while True:
        k = np.max(np.abs(signed_curvature(flow.x)), axis=1)[flow.alive]
        if np.max(k) < schedule.kappa_tol:
            return flow.t
        if flow.t >= schedule.t_max:
            worst = int(np.nonzero(flow.alive)[0][np.argmax(k)])
            raise RetractionError(
                f"convergence cutoff not reached: max curvature {np.max(k):.3g} at t={flow.t:.3g}",
                {"t": flow.t, "member": worst, "max_kappa": float(np.max(k)), "curve": flow.x[worst].tolist()},
            )
        flow.advance(min(flow.t + dt, schedule.t_max), check_embedded=False)


def _guarded(fn, tau, *args):
    try:
        return fn(*args)
    except ExtinctionError as err:
        raise RetractionError(f"member extinction at tau={tau:g}: {err}", {"tau": tau}) from err


def geodesic_match(metric: FinslerMetric, fam: GeodesicFamily, members) -> float:
    """Largest Hausdorff distance between a member and the metric's geodesic started along it."""
    worst = 0.0
    for i in members:
        c = fam.member_nodes(256)[i] if fam.great_circles else fam.nodes[i]
        x0 = c[0]
        v0 = normalize(project_tangent(x0, c[1] - c[-1]))
        xi0 = metric.legendre(x0[None], v0[None])
        tr = integrate(metric, x0[None], xi0, TWO_PI)[0]
        pts = tr.positions(np.linspace(0, TWO_PI, 512, endpoint=False))
        worst = max(worst, curve_hausdorff(pts, c))
    return worst


def _deflection(fam: GeodesicFamily) -> np.ndarray:
    if fam.great_circles:
        return np.zeros(len(fam))
    p = best_fit_poles(fam.nodes)
    return np.max(np.abs(np.einsum("mni,mi->mn", fam.nodes, p)), axis=1)


def retract(
    metric: FinslerMetric,
    schedule: RetractionSchedule | None = None,
    n_family: int = 4096,
    seed: int = 0,
    family: GeodesicFamily | None = None,
    flow_cfg: FlowConfig | None = None,
    recon_cfg: ReconstructionConfig | None = None,
    verify_samples: int = 16,
    verify_tol: float = 2e-2,
    geodesic_members: int = 0,
    grid=None,
    log=None,
) -> RetractionResult:
    """Run the retraction of ``metric`` over the schedule.

    Each step reconstructs F_tau from the family at tau and reports its grid
    error against the input and the round metric, the Crofton length of
    every member, the pairwise crossing counts and a Zoll verification with
    ``verify_samples`` geodesics (skipped when 0).
    """
    schedule = schedule or RetractionSchedule()
    say = log or (lambda msg: None)
    grid = probe_grid() if grid is None else grid
    f_input = metric.norm(*grid)
    timings = {}
    t0 = time.perf_counter()
    fam0 = family if family is not None else family_from_metric(metric, n_family, seed=seed)
    timings["family"] = time.perf_counter() - t0
    balance = check_balanced(fam0)
    say(f"family: {len(fam0)} members, balance deviation {balance:.2e}")
    n_nodes = fam0.member_nodes().shape[1]
    cfg = flow_cfg or FlowConfig(n_nodes=max(n_nodes, 64), adapt_nodes=False, kappa_tol=schedule.kappa_tol)
    flow = None
    snapped = None
    cutoff = None
    steps = []
    for tau in schedule.taus:
        ts = time.perf_counter()
        if tau < 1.0:
            t_flow = schedule.flow_time(tau)
            if tau == 0.0 or fam0.great_circles:
                # great circles are fixed by the flow
                fam = fam0
            else:
                flow = flow or FamilyFlow(fam0.curves(n_nodes), cfg, balanced=True)
                _guarded(flow.advance, tau, t_flow)
                fam = fam0.with_nodes(flow.x.copy())
        else:
            if snapped is None:
                if fam0.great_circles:
                    cutoff, poles = 0.0, fam0.poles
                else:
                    flow = flow or FamilyFlow(fam0.curves(n_nodes), cfg, balanced=True)
                    cutoff = _guarded(_converge, tau, flow, schedule)
                    poles = best_fit_poles(flow.x)
                meta = dict(fam0.meta, snapped_at=cutoff)
                snapped = GeodesicFamily(fam0.weights, fam0.lineage, poles=poles, partner=fam0.partner, meta=meta)
                w_round = round_weights(snapped)
            t_flow = cutoff
            fam = interpolate_measure(snapped, w_round, tau)
        m = reconstruct_metric(fam, recon_cfg)
        f_tau = m.norm(*grid)
        report = {
            "error_vs_input": float(np.max(np.abs(f_tau / f_input - 1.0))),
            "error_vs_round": float(np.max(np.abs(f_tau - 1.0))),
            "active_members": getattr(m, "active", len(fam)),
            "balance_deviation": float(np.max(np.abs(left_areas(fam) - TWO_PI))),
            "member_lengths": member_crofton_lengths(fam).to_dict(),
            "audit": m.audit,
        }
        if verify_samples:
            report["zoll"] = verify_zoll(m, n_samples=verify_samples, tol=verify_tol, seed=seed).to_dict()
        if geodesic_members:
            pick = np.argsort(-_deflection(fam), kind="stable")[:geodesic_members]
            report["geodesic_match"] = geodesic_match(m, fam, [int(i) for i in pick])
        report["seconds"] = time.perf_counter() - ts
        steps.append(RetractionStep(tau, float(t_flow), fam, m, report))
        say(
            f"tau={tau:g} t={t_flow:.4g} err_in={report['error_vs_input']:.4f} "
            f"err_round={report['error_vs_round']:.4f} "
            f"zoll={report.get('zoll', {}).get('passed')} ({report['seconds']:.1f}s)"
        )
    timings["total"] = time.perf_counter() - t0
    return RetractionResult(steps, schedule, metric, cutoff, timings)


# -- antipodal symmetry and the projective quotient -------------------------------


@dataclass
class AntipodalReport:
    worst_hausdorff: float
    worst_member: int
    balance_deviation: float
    tol: float
    passed: bool

    def to_dict(self):
        return dict(self.__dict__)


def antipodal_audit(fam: GeodesicFamily, tol: float = 1e-3, balance_tol: float = 1e-3) -> AntipodalReport:
    """Check that the antipodal image of every member is again a member (up to
    orientation) and that every member is balanced.  Report only."""
    bal = float(np.max(np.abs(left_areas(fam) - TWO_PI)))
    if fam.great_circles:
        return AntipodalReport(0.0, -1, bal, tol, bal <= balance_tol)
    nodes = fam.nodes
    area = normalize(np.sum(np.cross(nodes, np.roll(nodes, -1, axis=1)), axis=1))
    tree = cKDTree(area)
    flat = _deflection(fam) < 1e-12
    worst, worst_i = 0.0, -1
    for i in np.nonzero(~flat)[0]:
        img = -nodes[i]
        best = curve_hausdorff(img, nodes[i])
        if best > tol:
            # the image traverses the same way round its area vector
            _, cand = tree.query([area[i], -area[i]], k=min(8, len(fam)))
            for j in np.unique(cand):
                best = min(best, curve_hausdorff(img, nodes[j]))
        if best > worst:
            worst, worst_i = best, int(i)
    return AntipodalReport(worst, worst_i, bal, tol, worst <= tol and bal <= balance_tol)


@dataclass
class ProjectiveSummary:
    rows: list

    def to_dict(self):
        return {"steps": self.rows}


def quotient_to_projective(
    result: RetractionResult, sample: int = 32, tol: float = 1e-3, seed: int = 0
) -> ProjectiveSummary:
    """Per step: half-lengths of sampled members under F_tau and whether each
    member covers its image in the projective plane twice (an embedded,
    noncontractible loop)."""
    rows = []
    rng = np.random.default_rng(seed)
    for s in result.steps:
        audit = antipodal_audit(s.family, tol)
        if not audit.passed:
            raise AntipodalAuditError(
                f"antipodal audit failed at tau={s.tau:g}: worst Hausdorff {audit.worst_hausdorff:.3g}"
            )
        fam = s.family
        idx = np.arange(len(fam))
        if sample and sample < len(fam):
            idx = np.sort(rng.choice(len(fam), sample, replace=False))
        nodes = fam.member_nodes(512)
        half = []
        double_cover = True
        embedded = True
        for i in idx:
            c = nodes[i]
            half.append(0.5 * curve_length(s.metric, c))
            double_cover &= curve_hausdorff(-c, c) <= tol
            embedded &= is_simple(SphereCurve(c))
        half = np.array(half)
        rows.append(
            {
                "tau": s.tau,
                "members": [int(i) for i in idx],
                "half_length_min": float(half.min()),
                "half_length_max": float(half.max()),
                "max_deviation_from_pi": float(np.max(np.abs(half - math.pi))),
                "noncontractible": bool(double_cover),
                "embedded": bool(embedded),
                "antipodal": audit.to_dict(),
            }
        )
    return ProjectiveSummary(rows)
