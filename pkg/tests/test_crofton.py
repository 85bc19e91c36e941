from __future__ import annotations

import numpy as np
import pytest

from zoll.crofton import (
    GeodesicFamily,
    InsufficientDensityError,
    ReconstructionConfig,
    best_fit_poles,
    crofton_count,
    crofton_length,
    family_from_metric,
    interpolate_measure,
    member_crofton_lengths,
    reconstruct_metric,
    round_voronoi_weights,
    section_grid,
    section_reference,
)
from zoll.finsler import RoundMetric, grid_error, probe_grid
from zoll.sphere import FOUR_PI, TWO_PI, SphereCurve, great_circle, latitude_circle, normalize

ROUND = RoundMetric()


@pytest.fixture(scope="module")
def round_family():
    return family_from_metric(ROUND, 1024)


def test_section_grid_pairs_are_mirrors():
    s, a, partner = section_grid(64)
    assert np.all(partner[partner] == np.arange(64))
    np.testing.assert_allclose(a[partner], -a)
    np.testing.assert_allclose(np.mod(s[partner] - s, TWO_PI), np.pi)
    assert np.all(np.abs(a) < 1)


def test_round_family_mass_and_counts(round_family):
    assert round_family.total_mass == pytest.approx(FOUR_PI, abs=1e-9)
    res = member_crofton_lengths(round_family)
    assert set(res.count_histogram) == {"2"}
    # all members but itself and its partner cross twice: (4 pi - 2 w) / 2
    np.testing.assert_allclose(res.lengths, TWO_PI * (1 - 2 / 1024), rtol=1e-12)


def test_monte_carlo_equator_and_latitude():
    fam = family_from_metric(ROUND, 40_000, seed=3, mode="monte-carlo")
    eq = crofton_length(fam, SphereCurve(great_circle([0, 0, 1.0], 256)))
    assert eq == pytest.approx(TWO_PI, rel=1e-2)
    lat = SphereCurve(latitude_circle(1.0, 256))
    assert crofton_length(fam, lat) == pytest.approx(lat.length(), rel=2e-2)


def test_open_segment_length():
    fam = family_from_metric(ROUND, 40_000, seed=5, mode="monte-carlo")
    s = np.linspace(0, 1.0, 64)
    seg = SphereCurve(np.stack([np.cos(s), np.sin(s), 0 * s], 1), closed=False)
    assert crofton_count(fam, seg).length == pytest.approx(1.0, rel=3e-2)


def test_exclude_drops_member_and_partner(round_family):
    c = round_family.member(7)
    res = crofton_count(round_family, c, exclude=7)
    assert res.crossings[7] == 0 and res.crossings[round_family.partner[7]] == 0


def test_family_json_roundtrip(tmp_path, round_family, built_family):
    for fam in (round_family, built_family):
        p = fam.dump(tmp_path / "fam.json")
        back = GeodesicFamily.load(p)
        assert back.great_circles == fam.great_circles
        np.testing.assert_allclose(back.weights, fam.weights)
        np.testing.assert_allclose(back.member_nodes(), fam.member_nodes(), atol=1e-15)
        assert back.meta["section"] == fam.meta["section"]


def test_family_rejects_bad_records(round_family):
    d = round_family.to_dict()
    d["extra"] = 1
    with pytest.raises(ValueError, match="unknown"):
        GeodesicFamily.from_dict(d)
    d = round_family.to_dict()
    d["total_mass"] = 1.0
    with pytest.raises(ValueError, match="4 pi"):
        GeodesicFamily.from_dict(d)


def test_interpolate_measure_endpoints(round_family):
    w = np.full(len(round_family), FOUR_PI / len(round_family))
    w1 = round_family.weights * (1 + 0.1 * np.cos(np.arange(len(w))))
    fam1 = round_family.with_weights(w1 * FOUR_PI / w1.sum())
    assert interpolate_measure(fam1, w, 1.0) is fam1
    np.testing.assert_allclose(interpolate_measure(fam1, w, 2.0).weights, w)
    mid = interpolate_measure(fam1, w, 1.5).weights
    np.testing.assert_allclose(mid, 0.5 * (fam1.weights + w))
    with pytest.raises(ValueError):
        interpolate_measure(fam1, w, 0.5)


def test_voronoi_weights_total_mass(round_family):
    w = round_voronoi_weights(round_family.poles)
    assert w.sum() == pytest.approx(FOUR_PI)
    # a Fibonacci-like section grid is close to uniform on the pole sphere
    assert np.max(np.abs(w / (FOUR_PI / len(w)) - 1)) < 0.3


def test_best_fit_poles_orientation():
    p = normalize(np.array([[0.2, -0.4, 1.0], [1.0, 0.3, 0.1]]))
    nodes = np.stack([great_circle(q, 128) for q in p])
    np.testing.assert_allclose(best_fit_poles(nodes), p, atol=1e-12)
    np.testing.assert_allclose(best_fit_poles(nodes[:, ::-1]), -p, atol=1e-12)


def test_reconstruction_of_round_is_exact_with_reference(round_family):
    m = reconstruct_metric(round_family)
    assert m.active == 0
    x, v = probe_grid(8, 8, 4)
    np.testing.assert_allclose(m.norm(x, v), 1.0, atol=1e-14)


def test_plain_reconstruction_of_round():
    fam = family_from_metric(ROUND, 4096)
    m = reconstruct_metric(fam, ReconstructionConfig(control_variate=False), audit=False)
    assert grid_error(m, ROUND, probe_grid(12, 12, 8)) < 3e-2


def test_reference_cancels_shared_bias(round_family):
    # the same circles sampled from other start points all count as moved;
    # the difference with the reference is then pure quadrature noise
    fam = round_family.with_nodes(round_family.member_nodes(128))
    m = reconstruct_metric(fam, audit=False)
    assert m.active > 0.9 * len(fam)
    x, v = probe_grid(8, 8, 4)
    assert np.max(np.abs(m.norm(x, v) - 1)) < 2e-3


def test_section_reference_alignment(built_family):
    ref, w = section_reference(built_family)
    assert ref.shape == built_family.nodes.shape
    np.testing.assert_allclose(w, FOUR_PI / len(built_family))
    gap = np.max(np.abs(built_family.nodes - ref), axis=(1, 2))
    # members whose geodesic never enters the bump are exact great circles
    assert np.mean(gap < 1e-9) > 0.7


def test_built_family_is_zoll_like(built_family):
    res = member_crofton_lengths(built_family)
    assert set(res.count_histogram) == {"2"}
    assert res.deviation() < 2e-2


def test_built_reconstruction(built_metric, built_family):
    m = reconstruct_metric(built_family)
    assert m.audit["convexity"]["passed"]
    assert grid_error(m, built_metric, probe_grid(16, 16, 8)) < 3e-2


def test_insufficient_density():
    fam = family_from_metric(ROUND, 64)
    m = reconstruct_metric(fam, ReconstructionConfig(control_variate=False, sigma=0.05), audit=False)
    with pytest.raises(InsufficientDensityError, match="insufficient family density"):
        m.norm(np.array([[0, 0, 1.0]]), np.array([[1.0, 0, 0]]))


@pytest.mark.parametrize(
    "kw", [{"eps": 0.1}, {"order": 3}, {"sigma": 0.7}, {"mode": "exact"}, {"eta": 0.0}]
)
def test_reconstruction_config_validation(kw):
    with pytest.raises(ValueError):
        ReconstructionConfig(**kw)


def test_monte_carlo_probe_mode():
    fam = family_from_metric(ROUND, 20_000, seed=1, mode="monte-carlo")
    m = reconstruct_metric(fam, ReconstructionConfig(mode="monte-carlo", eps=0.05), audit=False)
    f = m.norm(np.array([[0, 0, 1.0], [1.0, 0, 0]]), np.array([[1.0, 0, 0], [0, 0, 1.0]]))
    np.testing.assert_allclose(f, 1.0, rtol=0.15)
