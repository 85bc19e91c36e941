from __future__ import annotations

import numpy as np
import pytest

from zoll.finsler import (
    EIGHT_PI_SQ,
    AnisotropicMetric,
    FrameQuadraticMetric,
    RoundMetric,
    audit_quadratic_convexity,
    dual_norm,
    legendre,
    sample_liouville,
    uniform_sphere,
)
from zoll.sphere import tangent_frame


def _random_tangent(rng, n):
    x = uniform_sphere(rng, n)
    v = rng.normal(size=(n, 3))
    v -= np.sum(v * x, 1)[:, None] * x
    return x, v


def test_round_dual_and_legendre(rng):
    x, v = _random_tangent(rng, 50)
    v /= np.linalg.norm(v, axis=1)[:, None]
    m = RoundMetric()
    np.testing.assert_allclose(m.dual_norm(x, v), 1.0, atol=1e-14)
    np.testing.assert_allclose(m.legendre(x, v), v, atol=1e-9)


def _brute_dual(a, b, xi1, xi2, n=10_000):
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    return np.max((xi1 * np.cos(t) + xi2 * np.sin(t)) / np.sqrt(a * np.cos(t) ** 2 + b * np.sin(t) ** 2))


@pytest.mark.parametrize("xi, expected", [((1.0, 0.0), 1.0), ((0.0, 1.0), 0.5)])
def test_quadratic_fiber_dual(xi, expected):
    x = np.array([0.2, -0.5, 0.7])
    x /= np.linalg.norm(x)
    b1, b2 = tangent_frame(x[None])
    m = FrameQuadraticMetric(1.0, 4.0)
    cov = xi[0] * b1[0] + xi[1] * b2[0]
    got = dual_norm(m, x, cov)
    assert got == pytest.approx(expected, abs=1e-10)
    assert got == pytest.approx(_brute_dual(1.0, 4.0, *xi), abs=1e-6)


def test_quadratic_fiber_legendre():
    x = np.array([0.6, 0.0, 0.8])
    b1, b2 = (b[0] for b in tangent_frame(x[None]))
    m = FrameQuadraticMetric(1.0, 4.0)
    xi = legendre(m, x, b1)
    np.testing.assert_allclose([xi @ b1, xi @ b2], [1.0, 0.0], atol=1e-9)
    xi = legendre(m, x, 0.5 * b2)
    np.testing.assert_allclose([xi @ b1, xi @ b2], [0.0, 2.0], atol=1e-9)
    assert xi @ (0.5 * b2) == pytest.approx(1.0, abs=1e-9)


def test_legendre_round_trip_anisotropic(rng):
    m = AnisotropicMetric((1.0, 1.0, 1.3))
    x, v = _random_tangent(rng, 1000)
    v /= m.norm(x, v)[:, None]
    xi = m.legendre(x, v)
    np.testing.assert_allclose(np.sum(xi * v, 1), 1.0, atol=1e-7)
    np.testing.assert_allclose(m.dual_norm(x, xi), 1.0, atol=1e-7)
    np.testing.assert_allclose(m.inverse_legendre(x, xi), v, atol=1e-6)


def test_homogeneity_and_reversibility(rng):
    m = AnisotropicMetric((1.0, 0.8, 1.3))
    x, v = _random_tangent(rng, 100)
    base = m.norm(x, v)
    for t in (-2.0, -1.0, 0.5, 3.0):
        np.testing.assert_allclose(m.norm(x, t * v), abs(t) * base, rtol=1e-9)
    assert np.all(m.norm(x, -v) == base)


def test_round_audit_margin_one():
    rep = audit_quadratic_convexity(RoundMetric(), 100, 16)
    assert rep.passed
    assert rep.margin == pytest.approx(1.0, abs=1e-6)


def test_liouville_round_volume():
    batch = sample_liouville(RoundMetric(), 100_000, seed=1)
    assert batch.volume == pytest.approx(EIGHT_PI_SQ, rel=1e-12)
    assert np.sum(batch.weight) == pytest.approx(batch.volume, rel=1e-12)
    # covectors are F*-unit and tangent
    np.testing.assert_allclose(np.linalg.norm(batch.form, axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.sum(batch.form * batch.base, 1), 0.0, atol=1e-12)


def test_liouville_round_base_uniform():
    from scipy.stats import chisquare

    batch = sample_liouville(RoundMetric(), 60_000, seed=3)
    z = batch.base[:, 2]
    phi = np.arctan2(batch.base[:, 1], batch.base[:, 0])
    # equal-area cells: uniform in z and in longitude
    cell = np.floor((z + 1) / 2 * 6).astype(int) * 8 + np.floor((phi + np.pi) / (2 * np.pi) * 8).astype(int)
    counts = np.bincount(np.clip(cell, 0, 47), minlength=48)
    assert chisquare(counts).pvalue > 0.01


def test_liouville_equal_weights_mass():
    batch = sample_liouville(AnisotropicMetric(), 2000, seed=2, equal_weights=True)
    assert np.sum(batch.weight) == pytest.approx(4 * np.pi, abs=1e-12)
    np.testing.assert_allclose(
        AnisotropicMetric().dual_norm(batch.base, batch.form), 1.0, atol=1e-8
    )
