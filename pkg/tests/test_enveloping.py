from __future__ import annotations

import numpy as np
import pytest

from zoll.enveloping import (
    AmplitudeTooLargeError,
    EnvelopingFamily,
    EnvelopingMetric,
    OutsideDiskError,
    base_enveloping,
    build_metric,
    content_fingerprint,
    default_family,
    dual_curve,
    enveloping_value,
    gradient_geodesic,
    make_antipodal,
)
from zoll.finsler import probe_grid
from zoll.sphere import exp_map, geodesic_distance, normalize, project_tangent, tangent_frame

X0 = np.array([0.0, 0.0, 1.0])
R = np.pi / 8


def points_in_disk(rng, n, center=X0, radius=R):
    b1, b2 = (b[0] for b in tangent_frame(center[None]))
    a = rng.uniform(0, 2 * np.pi, n)
    r = radius * np.sqrt(rng.uniform(0, 1, n))
    v = r[:, None] * (np.cos(a)[:, None] * b1 + np.sin(a)[:, None] * b2)
    return exp_map(np.broadcast_to(center, v.shape), v)


def sup_distance(disk, x, y, n_p=4096):
    p = np.linspace(-np.pi, np.pi, n_p, endpoint=False)[None]
    return float(np.max(enveloping_value(disk, p, x[None]) - enveloping_value(disk, p, y[None])))


def test_base_enveloping_values(rng):
    b1, b2 = (b[0] for b in tangent_frame(X0[None]))
    assert base_enveloping(X0, R, 0.7, X0) == pytest.approx(0.0, abs=1e-15)
    p = 0.7
    up = np.cos(p) * b1 + np.sin(p) * b2
    assert base_enveloping(X0, R, p, np.cos(R) * X0 + np.sin(R) * up) == pytest.approx(R, abs=1e-12)
    for x in points_in_disk(rng, 20):
        assert base_enveloping(X0, R, p + np.pi, x) == pytest.approx(-base_enveloping(X0, R, p, x), abs=1e-14)
    with pytest.raises(OutsideDiskError):
        base_enveloping(X0, R, 0.0, [1.0, 0, 0])


def test_base_enveloping_is_distance_to_bisector():
    # brute force distance from x to the sampled great circle orthogonal to u_p
    b1, b2 = (b[0] for b in tangent_frame(X0[None]))
    p = 1.1
    up = np.cos(p) * b1 + np.sin(p) * b2
    w = np.cross(X0, up)
    t = np.linspace(0, 2 * np.pi, 200_000, endpoint=False)
    circle = np.cos(t)[:, None] * X0 + np.sin(t)[:, None] * w
    x = normalize(X0 + 0.2 * up + 0.1 * w)
    d = np.min(geodesic_distance(circle, x))
    assert base_enveloping(X0, R, p, x) == pytest.approx(d, abs=1e-9)


def test_perturbed_family_is_odd_in_p(rng):
    disk = EnvelopingMetric(default_family(0.03, antipodal=False)).disk_list[0]
    x = points_in_disk(rng, 50)
    p = rng.uniform(-np.pi, np.pi, (50, 7))
    np.testing.assert_allclose(enveloping_value(disk, p + np.pi, x), -enveloping_value(disk, p, x), atol=1e-14)


def test_collar_is_unperturbed(rng):
    fam = default_family(0.03, antipodal=False)
    disk = EnvelopingMetric(fam).disk_list[0]
    round_disk = EnvelopingMetric(fam.with_bumps(())).disk_list[0]
    pts = points_in_disk(rng, 4000)
    collar = pts[geodesic_distance(X0[None], pts) > R - fam.collar]
    p = rng.uniform(-np.pi, np.pi, (len(collar), 5))
    np.testing.assert_array_equal(enveloping_value(disk, p, collar), enveloping_value(round_disk, p, collar))


def test_unperturbed_metric_is_round():
    m = build_metric(EnvelopingFamily())
    x, v = probe_grid(10, 10, 10)
    assert np.max(np.abs(m.norm(x, v) - 1)) < 1e-6


def test_dual_norm_of_family_differentials(rng, built_metric):
    disk = built_metric.disk_list[0]
    x = points_in_disk(rng, 40, radius=0.9 * R)
    p = rng.uniform(-np.pi, np.pi, (40, 1))
    xi = dual_curve(disk, p, x)[:, 0]
    np.testing.assert_allclose(built_metric.dual_norm(x, xi), 1.0, atol=1e-6)


def test_built_metric_differs_from_round_only_in_the_disks(built_metric):
    x, v = probe_grid(24, 24, 8)
    dev = np.abs(built_metric.norm(x, v) - 1)
    inside = np.min(geodesic_distance(np.stack([X0, -X0]), x[:, None, :]), axis=1) < R
    assert np.all(dev[~inside] < 1e-12)
    assert 0.01 < dev[inside].max() < 0.1


def test_small_amplitude_is_linear(rng):
    x = points_in_disk(rng, 2000, radius=0.15)
    v = normalize(project_tangent(x, rng.normal(size=x.shape)))
    d = [np.max(np.abs(build_metric(default_family(e)).norm(x, v) - 1)) for e in (0.01, 0.02)]
    assert d[1] / d[0] == pytest.approx(2.0, rel=0.1)


def test_amplitude_too_large_reports_fiber():
    with pytest.raises(AmplitudeTooLargeError, match="amplitude too large") as err:
        build_metric(default_family(0.2))
    assert err.value.fiber is not None


def test_bump_must_avoid_collar():
    fam = default_family(0.03)
    b = fam.bumps[0]
    off = type(b)(b.p0, normalize([0.25, 0, 1.0]), b.eps, b.sigma_p, b.sigma_x)
    with pytest.raises(ValueError, match="collar"):
        fam.with_bumps((off,))


def test_antipodal_symmetry_is_exact(rng, built_metric):
    x = normalize(rng.normal(size=(1000, 3)))
    x[:500] = points_in_disk(rng, 500)
    v = project_tangent(x, rng.normal(size=(1000, 3)))
    np.testing.assert_array_equal(built_metric.norm(-x, -v), built_metric.norm(x, v))
    with pytest.raises(ValueError):
        make_antipodal(EnvelopingFamily(radius=np.pi / 2 - 1e-3, collar=0.1))


def test_family_descriptor_roundtrip():
    fam = default_family(0.03)
    assert EnvelopingFamily.from_dict(fam.to_dict()) == fam
    with pytest.raises(KeyError):
        EnvelopingFamily.from_dict({**fam.to_dict(), "colour": 1})


def test_gradient_line_of_round_family_is_a_great_circle():
    fam = EnvelopingFamily()
    disk = EnvelopingMetric(fam).disk_list[0]
    nodes, s, exited = gradient_geodesic(fam, 0.4, normalize([0.05, -0.1, 1.0]), 2.0)
    assert exited
    pole = normalize(np.cross(nodes[0], nodes[-1]))
    assert np.max(np.abs(nodes @ pole)) < 1e-9
    assert geodesic_distance(nodes[-1], disk.center) == pytest.approx(R, abs=1e-9)


def test_gradient_line_is_unit_speed_for_its_function(built_metric):
    disk = built_metric.disk_list[0]
    p = 0.2
    up = np.cos(p) * disk.e1 + np.sin(p) * disk.e2
    start = normalize(np.cos(0.25) * disk.center - np.sin(0.25) * up)
    nodes, s, _ = gradient_geodesic(built_metric, p, start, 0.6)
    f = enveloping_value(disk, np.full((len(s), 1), p), nodes)[:, 0]
    np.testing.assert_allclose(f - f[0], s, atol=1e-6)


def test_gradient_chord_keeps_endpoint_tangents(built_metric):
    fam = default_family(0.03)
    disk = built_metric.disk_list[0]
    p = 0.1
    up = np.cos(p) * disk.e1 + np.sin(p) * disk.e2
    start = normalize(np.cos(R - 1e-6) * disk.center - np.sin(R - 1e-6) * up)
    a, _, _ = gradient_geodesic(built_metric, p, start, 2.0, n_out=4000)
    b, _, _ = gradient_geodesic(fam.with_bumps(()), p, start, 2.0, n_out=4000)
    np.testing.assert_allclose(a[-1], b[-1], atol=1e-6)
    ta, tb = normalize(a[-1] - a[-2]), normalize(b[-1] - b[-2])
    np.testing.assert_allclose(ta, tb, atol=1e-5)


def test_gradient_line_outside_disk_rejected():
    with pytest.raises(OutsideDiskError):
        gradient_geodesic(EnvelopingFamily(), 0.0, [1.0, 0, 0], 1.0)


def test_distance_along_gradient_lines(rng, built_metric):
    # gradient lines are minimizing, so their length equals the sup formula
    disk = built_metric.disk_list[0]
    for p in rng.uniform(-np.pi, np.pi, 4):
        up = np.cos(p) * disk.e1 + np.sin(p) * disk.e2
        start = normalize(np.cos(0.2) * disk.center - np.sin(0.2) * up + 0.03 * rng.normal(size=3))
        nodes, s, _ = gradient_geodesic(built_metric, p, start, 0.35, n_out=8)
        for k in (3, 7):
            assert sup_distance(disk, nodes[k], nodes[0]) == pytest.approx(s[k], abs=1e-4)


def test_boundary_distances_are_round(rng):
    disk = EnvelopingMetric(default_family(0.03)).disk_list[0]
    a = rng.uniform(0, 2 * np.pi, (10, 2))
    for s, t in a:
        x = np.cos(R) * disk.center + np.sin(R) * (np.cos(s) * disk.e1 + np.sin(s) * disk.e2)
        y = np.cos(R) * disk.center + np.sin(R) * (np.cos(t) * disk.e1 + np.sin(t) * disk.e2)
        assert sup_distance(disk, x, y, 20_000) == pytest.approx(geodesic_distance(x, y), abs=1e-5)


def test_content_fingerprint_decreases_with_amplitude():
    c = [content_fingerprint(default_family(e), n_points=12) for e in (0.0, 0.015, 0.03)]
    assert c[0] == pytest.approx(np.pi**2, abs=1e-6)
    assert c[0] > c[1] > c[2]
