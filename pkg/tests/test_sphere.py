from __future__ import annotations

import json

import numpy as np
import pytest

from zoll.sphere import (
    IndistinctCurvesError,
    NearTangencyWarning,
    NonSimpleCurveError,
    CurveCollapsedError,
    SphereCurve,
    count_transverse_intersections,
    enclosed_area,
    geodesic_distance,
    great_circle,
    great_circle_crossings,
    latitude_circle,
    reparametrize_constant_speed,
    self_intersections,
    slerp,
    tangent_frame,
)

E1, E2, E3 = np.eye(3)


def test_distance_trivial_cases():
    assert geodesic_distance(E1, E1) == 0.0
    assert geodesic_distance(E1, -E1) == pytest.approx(np.pi, abs=1e-15)
    assert geodesic_distance(E1, E2) == pytest.approx(np.pi / 2, abs=1e-15)


def test_distance_symmetric_and_tiny_angles(rng):
    p = rng.normal(size=(100, 3))
    q = rng.normal(size=(100, 3))
    p /= np.linalg.norm(p, axis=1)[:, None]
    q /= np.linalg.norm(q, axis=1)[:, None]
    np.testing.assert_allclose(geodesic_distance(p, q), geodesic_distance(q, p))
    # arccos loses half the digits here; arctan2 does not
    a = np.array([np.cos(1e-9), np.sin(1e-9), 0.0])
    assert geodesic_distance(E1, a) == pytest.approx(1e-9, rel=1e-6)


def test_tangent_frame_orthonormal_and_oriented(rng):
    x = rng.normal(size=(50, 3))
    x /= np.linalg.norm(x, axis=1)[:, None]
    b1, b2 = tangent_frame(x)
    np.testing.assert_allclose(np.sum(b1 * x, 1), 0, atol=1e-14)
    np.testing.assert_allclose(np.sum(b2 * b1, 1), 0, atol=1e-14)
    np.testing.assert_allclose(np.linalg.norm(b2, axis=1), 1, atol=1e-14)
    det = np.einsum("ij,ij->i", b1, np.cross(b2, x))
    np.testing.assert_allclose(det, 1, atol=1e-14)


def test_equator_area_is_half():
    eq = SphereCurve(great_circle(E3, 256))
    a = enclosed_area(eq)
    assert a.left_area == pytest.approx(2 * np.pi, abs=1e-10)
    assert a.right_area == pytest.approx(2 * np.pi, abs=1e-10)


def test_cap_area_and_orientation():
    # polyline inscribed in the colatitude-pi/3 circle; oracle is the exact
    # area of the inscribed geodesic polygon, which tends to pi as n grows
    for n in (512, 4096):
        cap = SphereCurve(latitude_circle(np.pi / 3, n))
        a = enclosed_area(cap)
        assert a.total == pytest.approx(4 * np.pi, abs=1e-10)
        assert abs(a.left_area - np.pi) < 40.0 / n**2
        b = enclosed_area(cap.reversed())
        assert b.left_area == pytest.approx(a.right_area, abs=1e-10)


def _vertex_angle(a, b, c):
    t1 = b - np.dot(b, a) * a
    t2 = c - np.dot(c, a) * a
    return np.arccos(np.dot(t1, t2) / np.linalg.norm(t1) / np.linalg.norm(t2))


def test_triangle_matches_girard():
    a = np.array([1.0, 0.0, 0.0])
    b = np.array([np.cos(0.3), np.sin(0.3), 0.0])
    c = np.array([np.cos(0.15), np.sin(0.15) * 0.6, np.sin(0.15) * 0.8])
    excess = _vertex_angle(a, b, c) + _vertex_angle(b, c, a) + _vertex_angle(c, a, b) - np.pi
    # subdivide the edges so the curve satisfies the node count rule
    edges = []
    for p, q in ((a, b), (b, c), (c, a)):
        edges.append(slerp(p, q, np.linspace(0, 1, 8, endpoint=False)))
    tri = SphereCurve(np.concatenate(edges))
    area = enclosed_area(tri)
    got = min(area.left_area, area.right_area)
    assert got == pytest.approx(excess, rel=1e-9)


def test_area_rejects_figure_eight():
    s = np.linspace(0, 2 * np.pi, 200, endpoint=False)
    pts = np.stack([np.ones_like(s), 0.3 * np.sin(s), 0.3 * np.sin(2 * s)], 1)
    with pytest.raises(NonSimpleCurveError) as err:
        enclosed_area(SphereCurve(pts))
    assert len(err.value.crossings) >= 1


def test_great_circles_cross_twice(rng):
    for _ in range(20):
        p, q = rng.normal(size=(2, 3))
        a = SphereCurve(great_circle(p, 200))
        b = SphereCurve(great_circle(q, 173))
        assert count_transverse_intersections(a, b).count == 2
        assert count_transverse_intersections(b, a).count == 2


def test_disjoint_latitudes_do_not_cross():
    a = SphereCurve(latitude_circle(0.5, 128))
    b = SphereCurve(latitude_circle(1.0, 128))
    assert count_transverse_intersections(a, b).count == 0


def test_identical_curves_rejected():
    a = SphereCurve(great_circle(E3, 64))
    with pytest.raises(IndistinctCurvesError, match="indistinct curves"):
        count_transverse_intersections(a, SphereCurve(a.nodes.copy()))


def test_near_tangency_is_reported_not_counted():
    a = SphereCurve(great_circle(E3, 256))
    tilt = np.array([0.0, np.sin(2e-4), np.cos(2e-4)])
    b = SphereCurve(great_circle(tilt, 256))
    with pytest.warns(NearTangencyWarning):
        res = count_transverse_intersections(a, b)
    assert res.count == 0
    assert res.near_tangencies == 2


def test_great_circle_crossings_matches_arc_test(rng):
    c = SphereCurve(latitude_circle(1.1, 300, axis=rng.normal(size=3)))
    poles = rng.normal(size=(40, 3))
    poles /= np.linalg.norm(poles, axis=1)[:, None]
    fast = great_circle_crossings(c.nodes, poles)
    slow = [count_transverse_intersections(c, SphereCurve(great_circle(p, 400))).count for p in poles]
    np.testing.assert_array_equal(fast, slow)


def test_reparametrize_uniform_equator_is_identity():
    eq = SphereCurve(great_circle(E3, 128))
    out = reparametrize_constant_speed(eq, 128)
    np.testing.assert_allclose(out.nodes, eq.nodes, atol=1e-12)


def test_reparametrize_clustered_equator():
    s = np.linspace(0, 1, 100, endpoint=False)
    s = 2 * np.pi * (s + 0.12 * np.sin(2 * np.pi * s))
    pts = np.stack([np.cos(s), np.sin(s), np.zeros_like(s)], 1)
    out = reparametrize_constant_speed(SphereCurve(pts), 256)
    assert len(out) == 256
    assert out.length() == pytest.approx(2 * np.pi, abs=1e-8)
    gaps = out.arc_lengths()
    np.testing.assert_allclose(gaps, 2 * np.pi / 256, atol=1e-10)
    np.testing.assert_allclose(out.nodes[:, 2], 0, atol=1e-14)
    np.testing.assert_allclose(out.nodes[0], pts[0])


def test_reparametrize_length_on_fine_curve():
    # non-geodesic curve: resampling a polyline cuts corners at order gap^2 k^2,
    # so the length check uses a finely resolved source
    c = SphereCurve(latitude_circle(1.0, 20000))
    out = reparametrize_constant_speed(c, 20000, method="cubic")
    assert out.length() == pytest.approx(c.length(), rel=1e-8)


def test_reparametrize_collapsed_curve():
    pts = np.tile(E3, (32, 1)) + 1e-9 * np.random.default_rng(0).normal(size=(32, 3))
    with pytest.raises(CurveCollapsedError, match="curve collapsed"):
        reparametrize_constant_speed(SphereCurve(pts), 64)


def test_equator_curvature_vanishes():
    for n in (64, 256):
        k = SphereCurve(great_circle(E3, n)).curvature()
        assert np.max(np.abs(k)) < 1e-10


def test_latitude_curvature_sign_and_value():
    theta = np.pi / 3
    c = SphereCurve(latitude_circle(theta, 512))
    # cap on the left, turning left: k = cot(theta)
    np.testing.assert_allclose(c.curvature(), 1 / np.tan(theta), rtol=1e-4)
    np.testing.assert_allclose(c.reversed().curvature(), -1 / np.tan(theta), rtol=1e-4)


def test_gauss_bonnet_consistency():
    c = SphereCurve(latitude_circle(0.8, 2048))
    total = np.sum(c.curvature() * c.arc_lengths())
    assert enclosed_area(c).left_area == pytest.approx(2 * np.pi - total, rel=1e-5)


def test_json_round_trip(tmp_path):
    c = SphereCurve(latitude_circle(0.7, 64), orientation=-1)
    path = tmp_path / "c.json"
    c.dump(path)
    data = json.loads(path.read_text())
    assert data["closed"] is True and data["orientation"] == -1
    back = SphereCurve.load(path)
    np.testing.assert_allclose(back.nodes, c.nodes)
    assert back.orientation == -1


def test_self_intersections_of_simple_curve_empty():
    assert len(self_intersections(SphereCurve(latitude_circle(1.2, 300)))) == 0
