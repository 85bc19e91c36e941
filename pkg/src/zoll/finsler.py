"""Reversible Finsler metrics on the unit sphere.

A metric is queried in batches: ``norm(x, v)`` for base points ``x`` of shape
(n, 3) and tangent vectors ``v`` of the same shape, ``dual(x, xi)`` for the
dual norm and its maximizing unit vector.  Everything else (Legendre map,
convexity audit, Liouville sampling, geodesic right-hand sides) is built on
these two calls, so a new metric only has to supply ``norm``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sphere import FOUR_PI, TWO_PI, normalize, project_tangent, tangent_frame

EIGHT_PI_SQ = 8.0 * np.pi**2


class NotConvexError(ValueError):
    pass


class DualNormError(RuntimeError):
    def __init__(self, message, residual=float("nan")):
        super().__init__(message)
        self.residual = residual


def _as_batch(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    return a[None] if a.ndim == 1 else a


def _fiber_directions(b1, b2, theta):
    """Unit vectors cos(theta) b1 + sin(theta) b2, broadcasting over trailing angles."""
    c, s = np.cos(theta), np.sin(theta)
    return c[..., None] * b1[:, None, :] + s[..., None] * b2[:, None, :]


class FinslerMetric:
    """Base class.  Subclasses implement :meth:`_norm` on tangent vectors.

    ``round_caps`` lists spherical caps ``(center, cos_radius)`` outside of
    which the metric coincides with the round one; ``None`` means unknown.
    """

    kind = "abstract"
    smoothness = 0.1
    scan_size = 64

    # -- evaluation -------------------------------------------------------
    integration_rtol = 1e-10

    def _norm(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def norm(self, x, v) -> np.ndarray:
        x = _as_batch(x)
        v = _as_batch(v)
        x, v = np.broadcast_arrays(x, v)
        return self._norm(x, v)

    def __call__(self, x, v):
        out = self.norm(x, v)
        return float(out[0]) if np.ndim(x) == 1 and np.ndim(v) == 1 else out

    @property
    def round_caps(self):
        return None

    def fd_step(self) -> float:
        return max(1e-5, self.smoothness / 100.0)

    def frame(self, x):
        return tangent_frame(_as_batch(x))

    # -- dual norm --------------------------------------------------------
    def _ratio(self, x, xi, b1, b2, theta):
        e = _fiber_directions(b1, b2, theta)
        n, m = theta.shape
        num = np.einsum("nmk,nk->nm", e, xi)
        den = self._norm(np.repeat(x, m, 0), e.reshape(-1, 3)).reshape(n, m)
        return num / den

    def dual(self, x, xi, tol: float = 1e-12, max_iter: int = 8):
        """Dual norm F*(xi) and the F-unit vector u* attaining it.

        Maximizes xi(e)/F(e) over the fiber circle: a coarse scan picks the
        best angle, then Newton iterations on five-point finite differences
        refine it.
        """
        x = _as_batch(x)
        xi = _as_batch(xi)
        x, xi = np.broadcast_arrays(x, xi)
        b1, b2 = tangent_frame(x)
        n = len(x)
        grid = np.linspace(0.0, TWO_PI, self.scan_size, endpoint=False)
        vals = self._ratio(x, xi, b1, b2, np.broadcast_to(grid, (n, self.scan_size)))
        theta = grid[np.argmax(vals, axis=1)]
        h = 1e-3
        offsets = np.array([-2 * h, -h, 0.0, h, 2 * h])
        step_cap = TWO_PI / self.scan_size
        for _ in range(max_iter):
            g = self._ratio(x, xi, b1, b2, theta[:, None] + offsets)
            d1 = (g[:, 0] - 8 * g[:, 1] + 8 * g[:, 3] - g[:, 4]) / (12 * h)
            d2 = (-g[:, 0] + 16 * g[:, 1] - 30 * g[:, 2] + 16 * g[:, 3] - g[:, 4]) / (12 * h * h)
            step = np.where(d2 < 0, -d1 / np.where(d2 < 0, d2, -1.0), np.sign(d1) * step_cap / 4)
            step = np.clip(step, -step_cap, step_cap)
            theta = theta + step
            if np.max(np.abs(step)) < tol:
                break
        residual = float(np.max(np.abs(step)))
        if residual > 1e-6:
            raise DualNormError("dual norm maximization did not converge", residual)
        e = _fiber_directions(b1, b2, theta[:, None])[:, 0]
        fe = self._norm(x, e)
        fstar = np.sum(xi * e, axis=1) / fe
        return fstar, e / fe[:, None]

    def dual_norm(self, x, xi) -> np.ndarray:
        return self.dual(x, xi)[0]

    # -- Legendre map -----------------------------------------------------
    def legendre(self, x, v, check: bool = True):
        """Fiber gradient of F at ``v`` (the covector xi with xi(v) = F(v))."""
        x = _as_batch(x)
        v = _as_batch(v)
        x, v = np.broadcast_arrays(x, v)
        b1, b2 = tangent_frame(x)
        h = 1e-5
        grad = np.zeros_like(v)
        for b in (b1, b2):
            d = (self._norm(x, v + h * b) - self._norm(x, v - h * b)) / (2 * h)
            grad += d[:, None] * b
        if check:
            margin = self.fiber_convexity(x, v)
            bad = margin <= 1e-6
            if np.any(bad):
                raise NotConvexError("not quadratically convex here")
        return grad

    def inverse_legendre(self, x, xi):
        fstar, u = self.dual(x, xi)
        return u * fstar[:, None]

    def fiber_convexity(self, x, v, h: float = 1e-3):
        """Second derivative of F^2/2 along the F-unit circle, in the angle of the fiber.

        With v = r(theta) e_theta on the unit circle the quantity returned is
        the normalized curvature of the indicatrix; it equals 1 for the round
        norm and vanishes at a flat spot.
        """
        x = _as_batch(x)
        v = _as_batch(v)
        b1, b2 = tangent_frame(x)
        theta0 = np.arctan2(np.sum(v * b2, 1), np.sum(v * b1, 1))
        th = theta0[:, None] + np.array([-h, 0.0, h])
        e = _fiber_directions(b1, b2, th)
        n = len(x)
        rho = 1.0 / self._norm(np.repeat(x, 3, 0), e.reshape(-1, 3)).reshape(n, 3)
        r0 = rho[:, 1]
        r1 = (rho[:, 2] - rho[:, 0]) / (2 * h)
        r2 = (rho[:, 2] - 2 * rho[:, 1] + rho[:, 0]) / (h * h)
        # curvature of the polar curve r(theta), scaled by r so circles of any radius give 1
        k = (r0**2 + 2 * r1**2 - r0 * r2) / (r0**2 + r1**2) ** 1.5
        return k * r0

    # -- co-geodesic flow ----------------------------------------------------
    def geodesic_rhs(self, x, xi):
        """Vector field of H = F*^2/2 on the unit co-sphere bundle.

        xdot = F* u* and xi_dot = P_x dL/dx - (xi . xdot) x, where L = F^2/2
        is extended off the sphere by radial projection of x and tangential
        projection of the ambient velocity.  The last term keeps xi tangent.
        """
        fstar, u = self.dual(x, xi)
        v = fstar[:, None] * u
        h = self.fd_step()
        grad = np.zeros_like(x)
        for k in range(3):
            vals = []
            for sgn in (1.0, -1.0):
                xp = x.copy()
                xp[:, k] += sgn * h
                xp = normalize(xp)
                w = v - np.sum(v * xp, 1)[:, None] * xp
                vals.append(0.5 * self._norm(xp, w) ** 2)
            grad[:, k] = (vals[0] - vals[1]) / (2 * h)
        xidot = grad - np.sum(grad * x, 1)[:, None] * x - np.sum(xi * v, 1)[:, None] * x
        return v, xidot

    def fiber(self, x) -> "Fiber":
        return Fiber(self, normalize(np.asarray(x, dtype=float)))

    def describe(self) -> dict:
        return {"kind": self.kind}


@dataclass
class Fiber:
    """Convenience view of a metric at one base point."""

    metric: FinslerMetric
    x: np.ndarray

    @property
    def frame(self):
        b1, b2 = tangent_frame(self.x[None])
        return b1[0], b2[0]

    def norm(self, v):
        v = np.asarray(v, dtype=float)
        out = self.metric.norm(np.broadcast_to(self.x, np.shape(_as_batch(v))), v)
        return float(out[0]) if v.ndim == 1 else out

    def dual_norm(self, xi):
        f, u = self.metric.dual(self.x, xi)
        return float(f[0]), u[0]

    def legendre(self, v):
        return self.metric.legendre(self.x, v)[0]

    def convexity_margin(self, n_dirs: int = 64) -> float:
        b1, b2 = self.frame
        th = np.linspace(0, TWO_PI, n_dirs, endpoint=False)
        v = np.cos(th)[:, None] * b1 + np.sin(th)[:, None] * b2
        return float(np.min(self.metric.fiber_convexity(np.broadcast_to(self.x, v.shape), v)))


class RoundMetric(FinslerMetric):
    kind = "round"

    def _norm(self, x, v):
        return np.linalg.norm(v, axis=-1)

    def dual(self, x, xi, **_):
        xi = _as_batch(xi)
        n = np.linalg.norm(xi, axis=1)
        return n, xi / n[:, None]

    def geodesic_rhs(self, x, xi):
        return xi.copy(), -np.sum(xi * xi, 1)[:, None] * x

    @property
    def round_caps(self):
        return []

    def transversal_hint(self):
        return None


class AnisotropicMetric(FinslerMetric):
    """F(x, v) = |A v| for a fixed ambient matrix A: a non-Zoll control case."""

    kind = "anisotropic"

    def __init__(self, matrix=(1.0, 1.0, 1.3)):
        a = np.asarray(matrix, dtype=float)
        self.matrix = np.diag(a) if a.ndim == 1 else a

    def _norm(self, x, v):
        return np.linalg.norm(v @ self.matrix.T, axis=-1)

    def describe(self):
        return {"kind": self.kind, "matrix": self.matrix.tolist()}


class FrameQuadraticMetric(FinslerMetric):
    """F(v) = sqrt(a v1^2 + b v2^2) in the deterministic tangent frame.

    Only meant for fiberwise checks (dual norm, Legendre map); the frame
    field is not smooth across the sphere.
    """

    kind = "frame-quadratic"

    def __init__(self, a: float = 1.0, b: float = 4.0):
        self.a, self.b = a, b

    def _norm(self, x, v):
        b1, b2 = tangent_frame(x)
        v1 = np.sum(v * b1, -1)
        v2 = np.sum(v * b2, -1)
        return np.sqrt(self.a * v1**2 + self.b * v2**2)


# -- module-level queries --------------------------------------------------


def dual_norm(metric: FinslerMetric, x, xi):
    f = metric.dual_norm(x, xi)
    return float(f[0]) if np.ndim(xi) == 1 else f


def legendre(metric: FinslerMetric, x, v):
    out = metric.legendre(x, v)
    return out[0] if np.ndim(v) == 1 else out


@dataclass
class ConvexityReport:
    margin: float
    passed: bool
    worst_point: list
    worst_direction: list
    n_points: int
    n_directions: int

    def to_dict(self):
        return dict(self.__dict__)


def curve_length(metric: FinslerMetric, nodes) -> float:
    """Length of a closed curve through ``nodes`` under ``metric``.

    The nodes are joined by a periodic cubic spline in a uniform parameter and
    F(x, x') is integrated with the trapezoid rule, which is spectrally
    accurate for periodic integrands.
    """
    from scipy.interpolate import CubicSpline

    x = np.asarray(nodes, dtype=float)
    n = len(x)
    s = np.arange(n + 1) / n
    sp = CubicSpline(s, np.vstack([x, x[:1]]), bc_type="periodic")
    m = max(4 * n, 512)
    u = np.arange(m) / m
    p = normalize(sp(u))
    v = project_tangent(p, sp(u, 1))
    return float(np.mean(metric.norm(p, v)))


def probe_grid(n_theta: int = 32, n_phi: int = 32, n_dir: int = 16):
    """Base points on a colatitude/longitude grid (poles excluded) with ``n_dir``
    unit directions each, as flat (n, 3) arrays ``(x, v)``."""
    th = np.linspace(0, np.pi, n_theta + 2)[1:-1]
    ph = np.linspace(0, TWO_PI, n_phi, endpoint=False)
    T, P = np.meshgrid(th, ph, indexing="ij")
    x = np.stack([np.sin(T) * np.cos(P), np.sin(T) * np.sin(P), np.cos(T)], -1).reshape(-1, 3)
    b1, b2 = tangent_frame(x)
    a = np.linspace(0, np.pi, n_dir, endpoint=False)
    v = np.cos(a)[None, :, None] * b1[:, None] + np.sin(a)[None, :, None] * b2[:, None]
    return np.repeat(x, n_dir, axis=0), v.reshape(-1, 3)


def grid_error(metric: FinslerMetric, reference: FinslerMetric, grid=None) -> float:
    """Sup of |F/F_ref - 1| over a probe grid."""
    x, v = probe_grid() if grid is None else grid
    return float(np.max(np.abs(metric.norm(x, v) / reference.norm(x, v) - 1.0)))


def fibonacci_sphere(n: int) -> np.ndarray:
    k = np.arange(n) + 0.5
    z = 1.0 - 2.0 * k / n
    phi = np.pi * (1.0 + np.sqrt(5.0)) * k
    r = np.sqrt(1.0 - z * z)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], 1)


def audit_quadratic_convexity(
    metric: FinslerMetric, n_points: int = 400, n_directions: int = 32, points=None
) -> ConvexityReport:
    """Minimal fiberwise convexity margin over a point and direction grid."""
    if hasattr(metric, "convexity_margins"):
        return metric.convexity_margins(n_points, n_directions, points)
    x = fibonacci_sphere(n_points) if points is None else _as_batch(points)
    b1, b2 = tangent_frame(x)
    th = np.linspace(0, TWO_PI, n_directions, endpoint=False)
    e = _fiber_directions(b1, b2, np.broadcast_to(th, (len(x), n_directions))).reshape(-1, 3)
    xr = np.repeat(x, n_directions, 0)
    m = metric.fiber_convexity(xr, e)
    i = int(np.argmin(m))
    return ConvexityReport(
        float(m[i]), bool(m[i] > 0), xr[i].tolist(), e[i].tolist(), len(x), n_directions
    )


@dataclass
class LiouvilleBatch:
    base: np.ndarray
    form: np.ndarray
    weight: np.ndarray
    volume: float

    def __len__(self):
        return len(self.weight)

    def to_list(self):
        return [
            {"base": b.tolist(), "form": f.tolist(), "weight": float(w)}
            for b, f, w in zip(self.base, self.form, self.weight)
        ]


def uniform_sphere(rng: np.random.Generator, n: int) -> np.ndarray:
    return normalize(rng.normal(size=(n, 3)))


def sample_liouville(
    metric: FinslerMetric, n: int, seed: int, equal_weights: bool = False, chunk: int = 20000
) -> LiouvilleBatch:
    """Unit covectors distributed by the contact volume of the unit co-sphere bundle.

    Base points and fiber angles are drawn uniformly.  The covector in
    direction phi is r(phi) e_phi with r = 1/F*(e_phi); the contact volume
    density in (x, phi) is r^2 per unit area and angle, so each sample
    carries weight 8 pi^2 r^2 / n and the weights sum to the volume
    estimate.  With ``equal_weights`` samples are thinned by rejection so
    they all carry the same weight (the volume estimate is then taken from
    the pre-rejection batch).
    """
    rng = np.random.default_rng(seed)
    if not equal_weights:
        x = uniform_sphere(rng, n)
        phi = rng.uniform(0.0, TWO_PI, n)
        xi, r = _covectors_at(metric, x, phi, chunk)
        w = FOUR_PI * TWO_PI * r**2 / n
        if not np.all(np.isfinite(w)):
            raise FloatingPointError("non-finite Liouville density")
        return LiouvilleBatch(x, xi, w, float(np.sum(w)))

    xs, forms, r2_all = [], [], []
    got = 0
    r2_max = None
    while got < n:
        m = max(2 * (n - got), 256)
        x = uniform_sphere(rng, m)
        phi = rng.uniform(0.0, TWO_PI, m)
        xi, r = _covectors_at(metric, x, phi, chunk)
        r2 = r**2
        r2_all.append(r2)
        if r2_max is None:
            r2_max = 1.05 * float(np.max(r2))
        if np.max(r2) > r2_max:
            raise FloatingPointError("rejection envelope exceeded")
        keep = rng.uniform(size=m) * r2_max < r2
        xs.append(x[keep])
        forms.append(xi[keep])
        got += int(keep.sum())
    x = np.concatenate(xs)[:n]
    xi = np.concatenate(forms)[:n]
    volume = FOUR_PI * TWO_PI * float(np.mean(np.concatenate(r2_all)))
    return LiouvilleBatch(x, xi, np.full(n, FOUR_PI / n), volume)


def liouville_volume(metric: FinslerMetric, n: int = 200_000, seed: int = 0) -> tuple[float, float]:
    """Contact volume of the unit co-sphere bundle and its Monte Carlo standard error.

    It equals 8 pi^2 for the round metric and for every Zoll metric of
    period 2 pi.
    """
    batch = sample_liouville(metric, n, seed)
    err = float(np.std(batch.weight) * np.sqrt(n))
    return batch.volume, err


def _covectors_at(metric, x, phi, chunk):
    b1, b2 = tangent_frame(x)
    e = np.cos(phi)[:, None] * b1 + np.sin(phi)[:, None] * b2
    fstar = np.empty(len(x))
    for i in range(0, len(x), chunk):
        fstar[i : i + chunk] = metric.dual_norm(x[i : i + chunk], e[i : i + chunk])
    r = 1.0 / fstar
    return e * r[:, None], r
