from __future__ import annotations

import numpy as np
import pytest

from zoll.flow import (
    AreaLawDegenerateError,
    FlowConfig,
    area_law,
    area_law_residual,
    balance_drift,
    extinction_time,
    flow,
    flow_family,
    signed_curvature,
)
from zoll.sphere import SphereCurve, great_circle, latitude_circle, normalize

FAST = FlowConfig(n_nodes=256, min_nodes=64)


def wavy_equator(n=256, amp=(0.15, 0.05)):
    s = np.linspace(0, 2 * np.pi, n, endpoint=False)
    z = amp[0] * np.sin(3 * s) + amp[1] * np.cos(5 * s)
    return SphereCurve(normalize(np.stack([np.cos(s), np.sin(s), z], 1)))


def test_area_law_closed_form():
    # the law starts at a0 and vanishes at the extinction time
    assert area_law(1.0, 0.0) == pytest.approx(1.0)
    a0 = np.pi
    assert area_law(a0, extinction_time(a0)) == pytest.approx(0.0, abs=1e-12)
    assert extinction_time(np.pi) == pytest.approx(np.log(2))


def test_latitude_curvature_is_cot():
    th = np.pi / 3
    k = signed_curvature(latitude_circle(th, 512)[None])[0]
    assert np.allclose(k, 1 / np.tan(th), rtol=1e-4)


def test_equator_is_stationary():
    tr = flow(SphereCurve(great_circle([0, 0, 1.0], 256)), FAST, t_stop=0.5)
    assert tr.final.length == pytest.approx(2 * np.pi, abs=1e-8)
    assert tr.final.max_abs_curvature < 1e-8


@pytest.mark.parametrize("colat", [np.pi / 3, 2 * np.pi / 3])
def test_latitude_follows_area_law(colat):
    tr = flow(SphereCurve(latitude_circle(colat, 256)), FAST)
    assert tr.status == "extinct"
    assert area_law_residual(tr) < 5e-3
    assert tr.final.t == pytest.approx(extinction_time(tr.left_areas[0]), rel=2e-3)
    assert np.all(np.diff(tr.lengths) < 0)


def test_balanced_wavy_curve_converges_to_great_circle():
    c = wavy_equator()
    tr = flow(c, FAST)
    assert tr.status == "converged-to-equator"
    assert tr.final.max_abs_curvature < 1e-3
    assert tr.final.length == pytest.approx(2 * np.pi, abs=1e-3)
    assert balance_drift(tr) < 1e-3
    assert np.all(np.diff(tr.lengths) <= 1e-12)


def test_balanced_curve_rejects_area_law():
    tr = flow(SphereCurve(great_circle([0, 0, 1.0], 128)), FAST, t_stop=0.05)
    with pytest.raises(AreaLawDegenerateError, match="area law degenerate"):
        area_law_residual(tr)


def test_family_keeps_double_crossings():
    curves = [
        wavy_equator(128),
        SphereCurve(great_circle(normalize([1.0, 0.2, 0.3]), 128)),
        SphereCurve(great_circle(normalize([0.1, 1.0, -0.4]), 128)),
    ]
    res = flow_family(curves, [0.05, 0.2], FlowConfig(n_nodes=128, adapt_nodes=False), balanced=True)
    assert res.monotone
    for cp in res.checkpoints:
        iu = np.triu_indices(len(curves), 1)
        assert np.all(cp.counts[iu] == 2)


def test_disjoint_latitudes_stay_disjoint():
    curves = [SphereCurve(latitude_circle(0.5, 128)), SphereCurve(latitude_circle(0.9, 128))]
    res = flow_family(curves, [0.05, 0.1], FlowConfig(n_nodes=128, adapt_nodes=False))
    for cp in res.checkpoints:
        assert cp.counts[0, 1] == 0
