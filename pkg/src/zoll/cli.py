"""``zoll`` command line: build, verify, flow, retract, crofton-length, round-checks.

Every command writes a report envelope (JSON) listing its criteria with
values and tolerances, plus CSV series and PNG quick-looks where relevant.
Exit status: 0 when every criterion passes, 1 when one fails, 2 on a bad
configuration, 3 on a numerical abort (a state dump is written and its path
printed).
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import math
import sys
import time
import traceback
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .crofton import (
    GeodesicFamily,
    InsufficientDensityError,
    NonGenericIncidenceError,
    NotZollError,
    crofton_count,
    family_from_metric,
)
from .enveloping import AmplitudeTooLargeError, EnvelopingFamily, build_metric, default_family
from .finsler import (
    EIGHT_PI_SQ,
    DualNormError,
    FinslerMetric,
    RoundMetric,
    curve_length,
    liouville_volume,
    probe_grid,
)
from .flow import (
    AreaLawDegenerateError,
    CurveFlow,
    EmbeddingLostError,
    ExtinctionError,
    FlowConfig,
    FlowTrajectory,
    area_law,
    area_law_residual,
    extinction_time,
    flow_family,
)
from .geodesics import StepSizeCollapse, jacobi_zero_count_batch, verify_zoll
from .io import (
    SCHEMA_VERSION,
    ConfigError,
    check_fields,
    load_metric,
    metric_from_descriptor,
    read_json,
    save_metric,
    write_json,
)
from .parallel import worker_count
from .retraction import (
    RetractionError,
    RetractionResult,
    RetractionSchedule,
    quotient_to_projective,
    retract,
)
from .sphere import TWO_PI, SphereCurve, curves_from_json, great_circle, latitude_circle

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

NUMERICAL_ERRORS = (
    RetractionError,
    NotZollError,
    StepSizeCollapse,
    EmbeddingLostError,
    ExtinctionError,
    DualNormError,
    InsufficientDensityError,
    NonGenericIncidenceError,
    FloatingPointError,
)


# -- report envelope -------------------------------------------------------------


@dataclass
class Criterion:
    name: str
    value: float
    tolerance: float
    passed: bool
    relation: str = "<"

    def to_dict(self):
        return dict(self.__dict__)


def within(name, value, tol, relation="<") -> Criterion:
    value = float(value)
    ok = value < tol if relation == "<" else value <= tol
    return Criterion(name, value, float(tol), bool(ok and math.isfinite(value)), relation)


def equals(name, value, target) -> Criterion:
    return Criterion(name, float(value), float(target), bool(value == target), "==")


@dataclass
class ReportEnvelope:
    command: str
    config: dict
    criteria: list = field(default_factory=list)
    results: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    out: Path | None = None

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.criteria)

    def body(self) -> dict:
        """Deterministic part: identical config and seed give identical bodies."""
        return {
            "schema_version": SCHEMA_VERSION,
            "command": self.command,
            "config": self.config,
            "criteria": [c.to_dict() for c in self.criteria],
            "passed": self.passed,
            "results": self.results,
            "artifacts": sorted(str(a) for a in self.artifacts),
        }

    def to_dict(self) -> dict:
        run = {
            "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "timings": self.timings,
            "version": __version__,
        }
        return {"body": self.body(), "run": run}

    def write(self, path) -> Path:
        return write_json(self.to_dict(), path)


# -- CSV plot data ---------------------------------------------------------------

CSV_KINDS = ("flow-series", "retraction-summary", "metric-grid")


def emit_plot_data(obj, kind: str) -> str:
    """Flat CSV for external plotting.

    flow-series: a FlowTrajectory or a dict label -> FlowTrajectory;
    retraction-summary: a RetractionResult (or its summary rows);
    metric-grid: a FinslerMetric, evaluated on the 32 x 32 x 16 probe grid.
    """
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if kind == "flow-series":
        if isinstance(obj, FlowTrajectory):
            obj = {"0": obj}
        if not isinstance(obj, dict) or not all(isinstance(v, FlowTrajectory) for v in obj.values()):
            raise TypeError("kind mismatch: flow-series needs flow trajectories")
        w.writerow(["curve", "t", "length", "left_area", "max_kappa", "area_law"])
        for label, tr in obj.items():
            a0 = tr.states[0].areas.left_area
            for s in tr.states:
                w.writerow([label] + [f"{v:.12g}" for v in (*s.row(), area_law(a0, s.t))])
    elif kind == "retraction-summary":
        rows = obj.summary_rows() if isinstance(obj, RetractionResult) else obj
        if not isinstance(rows, list) or not all(isinstance(r, dict) and "tau" in r for r in rows):
            raise TypeError("kind mismatch: retraction-summary needs a retraction result")
        cols = ["tau", "flow_time", "error_vs_round", "error_vs_input", "zoll_pass",
                "worst_intersection_count", "mean_member_length"]
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in cols])
    elif kind == "metric-grid":
        if not isinstance(obj, FinslerMetric):
            raise TypeError("kind mismatch: metric-grid needs a metric")
        x, v = probe_grid()
        f = obj.norm(x, v)
        w.writerow(["x", "y", "z", "vx", "vy", "vz", "F"])
        for row in np.column_stack([x, v, f]):
            w.writerow([f"{a:.12g}" for a in row])
    else:
        raise ValueError(f"unknown plot-data kind {kind!r}; expected one of {CSV_KINDS}")
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return f"{v:.12g}"
    return v


def _write_text(text, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


# -- commands --------------------------------------------------------------------

BUILD_FIELDS = {"schema_version", "eps", "antipodal", "center", "p0", "family"}


def build_config(record: dict) -> EnvelopingFamily:
    check_fields(record, BUILD_FIELDS, "build config")
    if record.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema version {record['schema_version']}")
    if "family" in record:
        if set(record) & {"eps", "antipodal", "center", "p0"}:
            raise ConfigError("give either a full family record or eps/antipodal/center/p0, not both")
        return EnvelopingFamily.from_dict(record["family"])
    eps = float(record.get("eps", 0.03))
    if eps <= 0:
        raise ConfigError("eps must be positive")
    return default_family(
        eps,
        antipodal=bool(record.get("antipodal", True)),
        center=tuple(record.get("center", (0.0, 0.0, 1.0))),
        p0=float(record.get("p0", 0.0)),
    )


def cmd_build(args) -> ReportEnvelope:
    record = read_json(args.config)
    try:
        fam = build_config(record)
    except (KeyError, TypeError, ValueError) as err:
        raise ConfigError(f"build config: {err}") from None
    metric = build_metric(fam)
    out = Path(args.out)
    rep = ReportEnvelope("build", {"config": record, "out": str(out)})
    conv = metric.convexity_margins(300, 512)
    rep.criteria.append(within("dual curve curvature margin (negated)", -conv.margin, 0.0))
    rep.results["convexity"] = conv.to_dict()
    rep.artifacts.append(save_metric(metric, out))
    if not args.no_plots:
        from .plotting import plot_indicatrices

        rep.artifacts.append(plot_indicatrices(metric, out.with_suffix(".indicatrix.png")))
    return rep


def cmd_verify(args) -> ReportEnvelope:
    metric = load_metric(args.metric)
    cfg = {"metric": str(args.metric), "samples": args.samples, "tol": args.tol, "seed": args.seed,
           "jacobi": args.jacobi}
    rep = ReportEnvelope("verify", cfg)
    zr = verify_zoll(metric, n_samples=args.samples, tol=args.tol, seed=args.seed, workers=args.workers)
    d = zr.to_dict()
    rep.results["zoll"] = d
    rep.criteria += [
        within("max |period - 2 pi|", zr.max_period_deviation, args.tol),
        equals("all geodesics closed", int(zr.all_closed), 1),
        equals("all geodesics simple", int(zr.all_simple), 1),
        equals("pairs not crossing exactly twice", sum(v for k, v in zr.intersection_histogram.items() if int(k) != 2), 0),
        equals("near tangencies", zr.near_tangencies, 0),
    ]
    if args.jacobi:
        from .finsler import sample_liouville

        lb = sample_liouville(metric, args.jacobi, args.seed + 1, equal_weights=True)
        jr = jacobi_zero_count_batch(metric, lb.base, lb.form)
        rep.results["jacobi"] = [j.to_dict() for j in jr]
        rep.criteria.append(equals("geodesics without exactly two simple zeros",
                                   sum(1 for j in jr if j.zeros != 2 or not j.simple), 0))
    out = Path(args.out) if args.out else Path(args.metric).with_suffix(".verify.json")
    if not args.no_plots:
        from .plotting import plot_periods

        rep.artifacts.append(plot_periods(zr.periods, args.tol, out.with_suffix(".periods.png")))
    rep.artifacts.append(out)
    rep.out = out
    return rep


def _parse_floats(text, what):
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"{what}: expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise ConfigError(f"{what}: empty list")
    return vals


def cmd_flow(args) -> ReportEnvelope:
    try:
        curves = curves_from_json(args.curves)
    except (OSError, ValueError, KeyError, TypeError) as err:
        raise ConfigError(f"curves file: {err}") from None
    checkpoints = sorted(_parse_floats(args.checkpoints, "checkpoints"))
    if checkpoints[0] <= 0:
        raise ConfigError("checkpoints must be positive")
    cfg = FlowConfig(n_nodes=args.nodes, adapt_nodes=False)
    out = Path(args.out)
    rep = ReportEnvelope("flow", {"curves": str(args.curves), "checkpoints": checkpoints, "nodes": args.nodes})
    trajs = {}
    series = {}
    for i, c in enumerate(curves):
        cf = CurveFlow(c, cfg)
        cps = []
        for t in checkpoints:
            tr = cf.advance(t)
            s = tr.final
            cps.append({"t": s.t, "length": s.length, "left_area": s.areas.left_area,
                        "max_kappa": s.max_abs_curvature, "status": tr.status})
            if tr.status == "extinct":
                break
        trajs[str(i)] = tr
        series[str(i)] = [dict(zip(("t", "length", "left_area", "max_kappa"), st.row())) for st in tr.states]
        rise = float(np.max(np.diff(tr.lengths), initial=-np.inf))
        rep.criteria.append(within(f"curve {i}: largest length increase", rise, 1e-12, "<="))
        entry = {"checkpoints": cps, "status": tr.status}
        try:
            res = area_law_residual(tr)
            entry["area_law_residual"] = res
            rep.criteria.append(within(f"curve {i}: area law relative residual", res, 1e-2))
            if tr.status == "extinct":
                te = extinction_time(tr.left_areas[0])
                rel = abs(tr.final.t - te) / te
                entry["extinction_time"] = {"observed": tr.final.t, "law": te}
                rep.criteria.append(within(f"curve {i}: extinction time relative error", rel, 1e-2))
        except AreaLawDegenerateError:
            entry["area_law_residual"] = None
        rep.results[f"curve_{i}"] = entry
    if len(curves) > 1:
        ff = flow_family(curves, checkpoints, cfg)
        rep.results["family"] = ff.summary()
        rep.criteria.append(equals("intersection counts never increase", int(ff.monotone), 1))
    rep.artifacts.append(_write_text(emit_plot_data(trajs, "flow-series"), out / "flow-series.csv"))
    if not args.no_plots:
        from .plotting import plot_flow_series

        rep.artifacts.append(plot_flow_series(series, out / "flow-series.png"))
    rep.out = out / "flow-report.json"
    rep.artifacts.append(rep.out)
    return rep


def _family_source(args):
    """The family to count against and the metric whose lengths it should reproduce."""
    if args.family:
        fam = GeodesicFamily.load(args.family)
        try:
            ref = metric_from_descriptor(fam.meta.get("metric", {"kind": "round"}), audit=False)
        except ConfigError:
            ref = None
        return fam, ref
    if args.metric:
        metric = load_metric(args.metric)
        return family_from_metric(metric, args.members, seed=args.seed), metric
    metric = RoundMetric()
    return family_from_metric(metric, args.members, seed=args.seed, mode="monte-carlo"), metric


def cmd_crofton_length(args) -> ReportEnvelope:
    try:
        curves = curves_from_json(args.curves)
    except (OSError, ValueError, KeyError, TypeError) as err:
        raise ConfigError(f"curves file: {err}") from None
    fam, ref = _family_source(args)
    cfg = {"curves": str(args.curves), "family": args.family, "metric": args.metric,
           "members": len(fam), "seed": args.seed, "tol": args.tol}
    rep = ReportEnvelope("crofton-length", cfg)
    rows = []
    for i, c in enumerate(curves):
        res = crofton_count(fam, c)
        row = {"curve": i, "crofton_length": res.length, "near_tangencies": res.near_tangencies}
        rep.criteria.append(equals(f"curve {i}: near tangencies", res.near_tangencies, 0))
        if ref is not None:
            target = curve_length(ref, c.nodes) if c.closed else float(np.sum(c.arc_lengths()))
            row["reference_length"] = target
            row["relative_error"] = abs(res.length - target) / target
            rep.criteria.append(within(f"curve {i}: relative length error", row["relative_error"], args.tol))
        rows.append(row)
    rep.results["lengths"] = rows
    out = Path(args.out)
    rep.out = out
    rep.artifacts.append(out)
    return rep


def cmd_round_checks(args) -> ReportEnvelope:
    rep = ReportEnvelope("round-checks", {"seed": args.seed, "members": args.members, "samples": args.samples})
    vol, err = liouville_volume(RoundMetric(), args.samples, args.seed)
    rep.results["weinstein_volume"] = {"estimate": vol, "stderr": err, "exact": EIGHT_PI_SQ}
    rep.criteria.append(within("Liouville volume relative error vs 8 pi^2", abs(vol / EIGHT_PI_SQ - 1), 1e-2))
    fam = family_from_metric(RoundMetric(), args.members, seed=args.seed, mode="monte-carlo")
    eq = SphereCurve(great_circle([0.0, 0.0, 1.0], 512))
    length = crofton_count(fam, eq).length
    rep.results["equator_crofton_length"] = length
    rep.criteria.append(within("equator Crofton length relative error vs 2 pi", abs(length / TWO_PI - 1), 1e-2))
    tr = CurveFlow(SphereCurve(latitude_circle(np.pi / 3, 512)), FlowConfig(n_nodes=512)).advance(1.0)
    res = area_law_residual(tr)
    te = extinction_time(tr.left_areas[0])
    rep.results["area_law"] = {"residual": res, "extinction_observed": tr.final.t, "extinction_law": te,
                               "status": tr.status}
    rep.criteria.append(within("area law relative residual (colatitude pi/3)", res, 1e-2))
    rep.criteria.append(within("extinction time relative error vs ln 2", abs(tr.final.t - te) / te, 1e-2))
    out = Path(args.out)
    rep.out = out
    rep.artifacts.append(out)
    return rep


def cmd_retract(args) -> ReportEnvelope:
    metric = load_metric(args.metric)
    try:
        schedule = RetractionSchedule.parse(args.taus)
    except ValueError as err:
        raise ConfigError(f"taus: {err}") from None
    if args.family_size < 100:
        raise ConfigError("family size must be at least 100")
    out = Path(args.out)
    cfg = {"metric": str(args.metric), "taus": list(schedule.taus), "family_size": args.family_size,
           "seed": args.seed, "verify_samples": args.verify_samples, "verify_tol": args.verify_tol,
           "geodesic_members": args.geodesic_members}
    rep = ReportEnvelope("retract", cfg)
    log = (lambda m: print(m, file=sys.stderr, flush=True)) if args.verbose else None
    res = retract(
        metric,
        schedule,
        n_family=args.family_size,
        seed=args.seed,
        verify_samples=args.verify_samples,
        verify_tol=args.verify_tol,
        geodesic_members=args.geodesic_members,
        log=log,
    )
    for s in res.steps:
        tag = f"tau_{s.tau:g}"
        fam_path = s.family.dump(out / f"family_{tag}.json")
        rep.artifacts.append(fam_path)
        rep.artifacts.append(save_metric(s.metric, out / f"metric_{tag}.json", family_path=fam_path.name))
        rep.artifacts.append(write_json({"tau": s.tau, "flow_time": s.flow_time, **s.report},
                                        out / f"verify_{tag}.json"))
    first, last = res.steps[0], res.steps[-1]
    rep.criteria.append(within("F_0 sup relative error vs input", first.report["error_vs_input"], 3e-2))
    rep.criteria.append(within("F_2 sup relative error vs round", last.report["error_vs_round"], 2e-2))
    for s in res.steps:
        ml = s.report["member_lengths"]
        bad = sum(v for k, v in ml["count_histogram"].items() if k != "2")
        rep.criteria.append(equals(f"tau={s.tau:g}: member pairs not crossing twice", bad, 0))
        rep.criteria.append(within(f"tau={s.tau:g}: member Crofton length deviation from 2 pi",
                                   ml["max_relative_deviation"], 2e-2))
        if "zoll" in s.report:
            rep.criteria.append(equals(f"tau={s.tau:g}: verify_zoll passes", int(s.report["zoll"]["passed"]), 1))
    rep.results = res.to_dict()
    if args.quotient:
        rep.results["projective"] = quotient_to_projective(res).to_dict()
    rows = res.summary_rows()
    rep.artifacts.append(_write_text(emit_plot_data(rows, "retraction-summary"), out / "retraction-summary.csv"))
    if not args.no_plots:
        from .plotting import plot_retraction_summary

        rep.artifacts.append(plot_retraction_summary(rows, out / "retraction-summary.png"))
    rep.timings.update(res.timings)
    rep.out = out / "retract-report.json"
    rep.artifacts.append(rep.out)
    return rep


# -- entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="zoll", description=__doc__.splitlines()[0])
    ap.add_argument("--workers", type=int, default=None, help="worker pool size (default: ZOLL_WORKERS or all cores)")
    ap.add_argument("--no-plots", action="store_true", help="skip PNG quick-looks")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="build an enveloping Zoll metric from a config record")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report", default=None)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("verify", help="check that geodesics close at 2 pi and cross pairwise twice")
    p.add_argument("--metric", required=True)
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--tol", type=float, default=5e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jacobi", type=int, default=0, help="also count Jacobi zeros on this many geodesics")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("flow", help="curve shortening flow of the curves in a JSON file")
    p.add_argument("--curves", required=True)
    p.add_argument("--checkpoints", required=True)
    p.add_argument("--nodes", type=int, default=512)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("retract", help="deform a Zoll metric to the round one")
    p.add_argument("--metric", required=True)
    p.add_argument("--taus", default="0,0.33,0.67,0.9,1,1.5,2")
    p.add_argument("--family-size", type=int, default=4096)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--verify-samples", type=int, default=16)
    p.add_argument("--verify-tol", type=float, default=2e-2)
    p.add_argument("--geodesic-members", type=int, default=0)
    p.add_argument("--quotient", action="store_true", help="add the projective-plane summary")
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_retract)

    p = sub.add_parser("crofton-length", help="Crofton lengths of curves against a geodesic family")
    p.add_argument("--curves", required=True)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--family", default=None, help="family JSON")
    src.add_argument("--metric", default=None, help="metric descriptor; its family is built")
    p.add_argument("--members", type=int, default=200_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=2e-2)
    p.add_argument("--out", default="crofton-length.json")
    p.set_defaults(func=cmd_crofton_length)

    p = sub.add_parser("round-checks", help="analytic checks on the round sphere")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--members", type=int, default=200_000)
    p.add_argument("--samples", type=int, default=200_000)
    p.add_argument("--out", default="round-checks.json")
    p.set_defaults(func=cmd_round_checks)
    return ap


def _validate(args):
    for name in ("samples", "members", "nodes", "family_size", "verify_samples", "jacobi", "geodesic_members"):
        v = getattr(args, name, None)
        if v is not None and v < 0:
            raise ConfigError(f"--{name.replace('_', '-')} must not be negative")
    for name in ("tol", "verify_tol"):
        v = getattr(args, name, None)
        if v is not None and not v > 0:
            raise ConfigError(f"--{name.replace('_', '-')} must be positive")


def _dump_state(args, err) -> Path:
    base = Path(getattr(args, "out", None) or ".")
    folder = base if base.suffix == "" else base.parent
    path = folder / f"{args.command}-failure.json"
    state = getattr(err, "state", None)
    if state is None and hasattr(err, "start"):
        state = {"start": err.start}
    write_json(
        {"command": args.command, "error": type(err).__name__, "message": str(err), "state": state or {},
         "traceback": traceback.format_exc()},
        path,
    )
    return path


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    t0 = time.perf_counter()
    try:
        args.workers = worker_count(args.workers)
        _validate(args)
        rep = args.func(args)
    except (ConfigError, AmplitudeTooLargeError, KeyError) as err:
        print(f"zoll {args.command}: configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERICAL_ERRORS as err:
        # before ValueError: some numerical failures subclass it
        path = _dump_state(args, err)
        print(f"zoll {args.command}: numerical failure: {err}\nstate dump: {path}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as err:
        print(f"zoll {args.command}: configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    rep.timings["wall"] = time.perf_counter() - t0
    out = rep.out
    if out is None:
        out = Path(args.report) if getattr(args, "report", None) else Path(args.out).with_suffix(".report.json")
        rep.artifacts.append(out)
    rep.write(out)
    for c in rep.criteria:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name}: {c.value:.6g} ({c.relation} {c.tolerance:g})")
    print(f"report: {out}")
    return EXIT_PASS if rep.passed else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
