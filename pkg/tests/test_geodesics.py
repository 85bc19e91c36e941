from __future__ import annotations

import numpy as np
import pytest

from zoll.enveloping import dual_curve, gradient_geodesic
from zoll.finsler import AnisotropicMetric, RoundMetric, sample_liouville
from zoll.geodesics import (
    NonlinearPerturbationError,
    detect_closure,
    integrate,
    jacobi_zero_count,
    jacobi_zero_count_batch,
    renormalize,
    straight_hausdorff_check,
    verify_zoll,
)
from zoll.sphere import TWO_PI, curve_hausdorff, normalize

ROUND = RoundMetric()
ANISO = AnisotropicMetric((1.0, 1.0, 1.3))


def generic_start():
    x = normalize(np.array([0.3, -0.5, 0.8]))
    v = normalize(np.cross(x, [0.2, 1.0, 0.4]))
    return x, v


def test_round_geodesic_returns_after_2pi():
    x, v = generic_start()
    tr = integrate(ROUND, x[None], v[None], TWO_PI)[0]
    xe, xie = tr(TWO_PI)
    np.testing.assert_allclose(xe[0], x, atol=1e-8)
    np.testing.assert_allclose(xie[0], v, atol=1e-8)
    assert straight_hausdorff_check(ROUND, x, v) < 1e-8


def test_unit_cosphere_is_kept(built_metric, rng):
    lb = sample_liouville(built_metric, 4, 3, equal_weights=True)
    for tr in integrate(built_metric, lb.base, lb.form, TWO_PI):
        x, xi = tr(np.linspace(0, TWO_PI, 200))
        np.testing.assert_allclose(built_metric.dual_norm(x, xi), 1.0, atol=1e-6)


def test_time_reversal(built_metric):
    lb = sample_liouville(built_metric, 2, 5, equal_weights=True)
    L = 2.5
    for x0, xi0 in zip(lb.base, lb.form):
        x1, xi1 = integrate(built_metric, x0[None], xi0[None], L)[0](L)
        # reversible metric: the geodesic of -v retraces the path
        x2, _ = integrate(built_metric, x1, -xi1, L)[0](L)
        np.testing.assert_allclose(x2[0], x0, atol=1e-7)


def test_anisotropic_geodesic_does_not_close():
    x, v = generic_start()
    x, xi = renormalize(ANISO, x[None], ANISO.legendre(x[None], v[None]))
    y, _ = integrate(ANISO, x, xi, TWO_PI)[0](TWO_PI)
    assert np.linalg.norm(y[0] - x[0]) > 0.1
    rec = detect_closure(ANISO, x[0], xi[0], tol=1e-3)
    assert not rec.closed and rec.trace


def test_round_closure_record():
    x, v = generic_start()
    rec = detect_closure(ROUND, x, v)
    assert rec.closed and rec.simple
    assert rec.period == pytest.approx(TWO_PI, abs=1e-8)


def test_built_metric_closure(built_metric):
    lb = sample_liouville(built_metric, 3, 11, equal_weights=True)
    for x, xi in zip(lb.base, lb.form):
        rec = detect_closure(built_metric, x, xi)
        assert rec.closed and rec.simple
        assert rec.period == pytest.approx(TWO_PI, abs=5e-3)


def test_verify_zoll_round_and_control():
    rep = verify_zoll(ROUND, n_samples=32, seed=1)
    assert rep.passed and set(rep.intersection_histogram) == {2}
    bad = verify_zoll(ANISO, n_samples=4, seed=1, max_length=4 * np.pi)
    assert not bad.passed and bad.witness is not None


def test_verify_zoll_is_worker_independent(built_metric):
    a = verify_zoll(built_metric, n_samples=8, seed=2, workers=1)
    b = verify_zoll(built_metric, n_samples=8, seed=2, workers=2)
    assert a.periods == b.periods
    assert a.passed and a.period_std < a.tol / 2


def test_gradient_and_hamiltonian_geodesics_agree(built_metric):
    disk = built_metric.disk_list[0]
    for p in (0.05, 0.9, 2.4):
        up = np.cos(p) * disk.e1 + np.sin(p) * disk.e2
        start = normalize(np.cos(0.3) * disk.center - np.sin(0.3) * up)
        nodes, s, _ = gradient_geodesic(built_metric, p, start, 0.8)
        xi = dual_curve(disk, np.array([[p]]), start[None])[0]
        pts = integrate(built_metric, start[None], xi, s[-1])[0].positions(s)
        assert curve_hausdorff(pts, nodes) < 1e-3


def test_jacobi_round_equator():
    rep = jacobi_zero_count(ROUND, [1.0, 0, 0], [0, 1.0, 0])
    assert rep.zeros == 2 and rep.simple
    assert rep.min_slope_ratio == pytest.approx(1.0, rel=1e-2)
    np.testing.assert_allclose(np.diff(rep.zero_locations), np.pi, atol=1e-3)


def test_jacobi_built_metric(built_metric):
    lb = sample_liouville(built_metric, 4, 7, equal_weights=True)
    for rep in jacobi_zero_count_batch(built_metric, lb.base, lb.form):
        assert rep.zeros == 2 and rep.simple


def test_jacobi_rejects_large_perturbation():
    with pytest.raises(NonlinearPerturbationError):
        jacobi_zero_count(ROUND, [1.0, 0, 0], [0, 1.0, 0], dv=0.05)


def test_zero_on_a_grid_point_counts_once():
    from zoll.geodesics import _sign_changes

    s = np.linspace(0, TWO_PI, 16, endpoint=False)
    y = np.cos(s)
    y[4] = y[12] = 0.0
    rep = _sign_changes(s, y, TWO_PI)
    assert rep.zeros == 2 and rep.simple
    np.testing.assert_allclose(rep.zero_locations, [np.pi / 2, 3 * np.pi / 2], atol=1e-12)
