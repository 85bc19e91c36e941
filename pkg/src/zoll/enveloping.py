"""Zoll metrics from enveloping functions on a disk.

On a round disk D of radius r < pi/4 around x0 the round metric is the
envelope of the unit-coslope functions f_p(x) = arcsin(x . u_p), where u_p
runs over the unit tangent circle at x0.  Perturbing each f_p by a bump that
is odd under p -> p + pi and vanishes near the boundary of D keeps every
gradient line of every f_p a geodesic of the envelope metric
F(v) = sup_p df_p(v); since the perturbed metric is round near and outside
the boundary of D, the new metric is Zoll with period 2 pi.

Each differential df_p(x) is a unit covector for the new metric, so for a
fixed x the curve C(p) = df_p(x) is the dual unit circle.  The primal norm is
max_p C(p) . v and the dual norm of xi is the gauge of that curve.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np
from scipy.integrate import solve_ivp

from .finsler import ConvexityReport, FinslerMetric, fibonacci_sphere
from .planar import PlanarNorm, mahler_product
from .sphere import TWO_PI, cross, geodesic_distance, normalize, tangent_frame

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


class AmplitudeTooLargeError(ValueError):
    def __init__(self, message, fiber=None, margin=float("nan")):
        super().__init__(message)
        self.fiber = fiber
        self.margin = margin


class OutsideDiskError(ValueError):
    pass


def smooth_step(t):
    """Phi(t) = exp(1 - 1/(1 - t)) on [0, 1), zero beyond; Phi(0) = 1."""
    t = np.asarray(t, dtype=float)
    inside = t < 1.0
    d = np.where(inside, 1.0 - t, 1.0)
    return np.where(inside, np.exp(1.0 - 1.0 / d), 0.0)


def smooth_step_prime(t):
    t = np.asarray(t, dtype=float)
    inside = t < 1.0
    d = np.where(inside, 1.0 - t, 1.0)
    return np.where(inside, -np.exp(1.0 - 1.0 / d) / d**2, 0.0)


@dataclass(frozen=True)
class BumpPerturbation:
    """eps * sigma_x * [psi(p) - psi(p + pi)] * beta(x) added to every f_p.

    psi is a cutoff of chord width sigma_p around the boundary angle p0,
    beta a cutoff of chord radius sigma_x around x_center.
    """

    p0: float
    x_center: tuple
    eps: float
    sigma_p: float = 1.4
    sigma_x: float = 0.12

    def __post_init__(self):
        c = normalize(np.asarray(self.x_center, dtype=float))
        object.__setattr__(self, "x_center", tuple(float(a) for a in c))
        if not 0 < self.sigma_p < np.sqrt(2.0):
            raise ValueError("sigma_p must lie in (0, sqrt 2) so the two p-supports are disjoint")
        if self.sigma_x <= 0:
            raise ValueError("sigma_x must be positive")

    @property
    def center(self) -> np.ndarray:
        return np.array(self.x_center)

    @property
    def support_radius(self) -> float:
        """Geodesic radius of the x-support."""
        return 2.0 * np.arcsin(min(self.sigma_x / 2.0, 1.0))

    def psi(self, p):
        return smooth_step((2.0 - 2.0 * np.cos(p - self.p0)) / self.sigma_p**2)

    def psi_prime(self, p):
        t = (2.0 - 2.0 * np.cos(p - self.p0)) / self.sigma_p**2
        return smooth_step_prime(t) * 2.0 * np.sin(p - self.p0) / self.sigma_p**2

    def amplitude(self, p):
        return self.eps * self.sigma_x * (self.psi(p) - self.psi(p + np.pi))

    def amplitude_prime(self, p):
        return self.eps * self.sigma_x * (self.psi_prime(p) - self.psi_prime(p + np.pi))

    def beta(self, x):
        d2 = np.sum((x - self.center) ** 2, axis=-1)
        return smooth_step(d2 / self.sigma_x**2)

    def beta_gradient(self, x):
        """Tangential gradient of beta at unit vectors x."""
        c = self.center
        d2 = np.sum((x - c) ** 2, axis=-1)
        g = smooth_step_prime(d2 / self.sigma_x**2) * 2.0 / self.sigma_x**2
        tang = -(c - np.sum(x * c, axis=-1, keepdims=True) * x)
        return g[..., None] * tang

    def mirrored(self) -> "BumpPerturbation":
        return replace(self, x_center=tuple(-a for a in self.x_center))

    def to_dict(self):
        return {
            "p0": self.p0,
            "x_center": list(self.x_center),
            "eps": self.eps,
            "sigma_p": self.sigma_p,
            "sigma_x": self.sigma_x,
        }


@dataclass(frozen=True)
class Disk:
    center: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    radius: float
    bumps: tuple


@dataclass(frozen=True)
class EnvelopingFamily:
    center: tuple = (0.0, 0.0, 1.0)
    radius: float = np.pi / 8
    collar: float | None = None
    bumps: tuple = ()
    antipodal: bool = False
    frame: tuple | None = None

    def __post_init__(self):
        c = normalize(np.asarray(self.center, dtype=float))
        object.__setattr__(self, "center", tuple(float(a) for a in c))
        if self.collar is None:
            object.__setattr__(self, "collar", self.radius / 4.0)
        object.__setattr__(self, "bumps", tuple(self.bumps))
        if self.frame is None:
            b1, b2 = tangent_frame(c[None])
            object.__setattr__(self, "frame", (tuple(b1[0]), tuple(b2[0])))
        self.validate()

    def validate(self):
        if not 0 < self.radius < np.pi / 4:
            raise ValueError("disk radius must lie in (0, pi/4)")
        if not 0 < self.collar < self.radius:
            raise ValueError("collar width must lie in (0, radius)")
        x0 = np.array(self.center)
        for b in self.bumps:
            reach = geodesic_distance(x0, b.center) + 2.0 * b.support_radius
            if reach > self.radius - self.collar + 1e-12:
                raise ValueError(
                    f"bump at {b.x_center} reaches {reach:.4f}, must stay within "
                    f"{self.radius - self.collar:.4f} of the center (one support radius off the collar)"
                )

    @property
    def x0(self) -> np.ndarray:
        return np.array(self.center)

    def disks(self) -> list[Disk]:
        e1, e2 = (np.array(a) for a in self.frame)
        out = [Disk(self.x0, e1, e2, self.radius, self.bumps)]
        if self.antipodal:
            out.append(
                Disk(-self.x0, -e1, -e2, self.radius, tuple(b.mirrored() for b in self.bumps))
            )
        return out

    def with_bumps(self, bumps) -> "EnvelopingFamily":
        return replace(self, bumps=tuple(bumps))

    def to_dict(self) -> dict:
        return {
            "center": list(self.center),
            "radius": self.radius,
            "collar": self.collar,
            "bumps": [b.to_dict() for b in self.bumps],
            "antipodal": bool(self.antipodal),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnvelopingFamily":
        allowed = {"center", "radius", "collar", "bumps", "antipodal", "kind"}
        unknown = set(d) - allowed
        if unknown:
            raise KeyError(f"unknown fields {sorted(unknown)}")
        bumps = []
        for b in d.get("bumps", []):
            extra = set(b) - {"p0", "x_center", "eps", "sigma_p", "sigma_x"}
            if extra:
                raise KeyError(f"unknown bump fields {sorted(extra)}")
            bumps.append(BumpPerturbation(**b))
        return cls(
            center=tuple(d.get("center", (0.0, 0.0, 1.0))),
            radius=float(d.get("radius", np.pi / 8)),
            collar=d.get("collar"),
            bumps=tuple(bumps),
            antipodal=bool(d.get("antipodal", False)),
        )


def default_family(eps: float = 0.03, antipodal: bool = True, center=(0.0, 0.0, 1.0), p0: float = 0.0):
    """Disk of radius pi/8 with one bump at its center, as large as the collar allows."""
    radius = np.pi / 8
    collar = radius / 4
    sigma_x = 2.0 * np.sin((radius - collar) / 4.0)
    c = normalize(np.asarray(center, dtype=float))
    bump = BumpPerturbation(p0=p0, x_center=tuple(c), eps=eps, sigma_p=1.4, sigma_x=sigma_x)
    return EnvelopingFamily(tuple(c), radius, collar, (bump,), antipodal)


def make_antipodal(fam: EnvelopingFamily) -> EnvelopingFamily:
    """Add the antipodal image of the disk and of every bump."""
    if 2 * fam.radius >= np.pi:
        raise ValueError("disk and its antipodal image overlap")
    return replace(fam, antipodal=True)


# -- closed forms on one disk ---------------------------------------------


def _u(disk: Disk, p):
    return np.cos(p)[..., None] * disk.e1 + np.sin(p)[..., None] * disk.e2


def _u_prime(disk: Disk, p):
    return -np.sin(p)[..., None] * disk.e1 + np.cos(p)[..., None] * disk.e2


def enveloping_value(disk: Disk, p, x):
    """f~_p(x) for p of shape (n, m) and x of shape (n, 3)."""
    s = np.einsum("nmk,nk->nm", _u(disk, p), x)
    out = np.arcsin(np.clip(s, -1.0, 1.0))
    for b in disk.bumps:
        out = out + b.amplitude(p) * b.beta(x)[:, None]
    return out


def dual_curve(disk: Disk, p, x, derivative: bool = False):
    """C(p) = df~_p(x) as tangent vectors, shape (n, m, 3); optionally dC/dp."""
    u = _u(disk, p)
    s = np.einsum("nmk,nk->nm", u, x)
    inv = 1.0 / np.sqrt(1.0 - s * s)
    m = u - s[..., None] * x[:, None, :]
    c = m * inv[..., None]
    grads = [b.beta_gradient(x) for b in disk.bumps]
    for b, g in zip(disk.bumps, grads):
        c = c + b.amplitude(p)[..., None] * g[:, None, :]
    if not derivative:
        return c
    up = _u_prime(disk, p)
    sp = np.einsum("nmk,nk->nm", up, x)
    mp = up - sp[..., None] * x[:, None, :]
    dc = mp * inv[..., None] + m * (s * sp * inv**3)[..., None]
    for b, g in zip(disk.bumps, grads):
        dc = dc + b.amplitude_prime(p)[..., None] * g[:, None, :]
    return c, dc


def base_enveloping(x0, r: float, p: float, x, frame=None) -> float:
    """Signed round distance from x to the great circle through x0 orthogonal to u_p."""
    x0 = normalize(np.asarray(x0, dtype=float))
    x = normalize(np.asarray(x, dtype=float))
    if geodesic_distance(x0, x) > r + 1e-12:
        raise OutsideDiskError("point lies outside the disk")
    if frame is None:
        b1, b2 = tangent_frame(x0[None])
        frame = (b1[0], b2[0])
    u = np.cos(p) * np.asarray(frame[0]) + np.sin(p) * np.asarray(frame[1])
    return float(np.arcsin(np.clip(np.dot(x, u), -1.0, 1.0)))


# -- the metric --------------------------------------------------------------


class EnvelopingMetric(FinslerMetric):
    """F~(x, v) = sup_p df~_p(x)(v) inside the disks, round outside."""

    kind = "enveloping"
    p_scan = 512

    def __init__(self, family: EnvelopingFamily, shortcut: bool = True):
        self.family = family
        self.disk_list = family.disks()
        self.shortcut = shortcut
        sx = [b.sigma_x for b in family.bumps]
        self.smoothness = min(sx) if sx else family.radius

    # membership -------------------------------------------------------------
    def _active(self, disk: Disk, x):
        """Mask of points whose fiber must be computed from the envelope."""
        if self.shortcut:
            mask = np.zeros(len(x), dtype=bool)
            for b in disk.bumps:
                mask |= np.sum((x - b.center) ** 2, axis=1) < b.sigma_x**2
            return mask
        return x @ disk.center >= np.cos(disk.radius) - 1e-12

    @property
    def round_caps(self):
        caps = []
        for d in self.disk_list:
            for b in d.bumps:
                # chord sigma_x, padded a little
                caps.append((b.center, 1.0 - (1.0 + 1e-3) ** 2 * b.sigma_x**2 / 2.0))
        return caps

    def transversal_hint(self):
        return self.family.x0

    # primal norm ----------------------------------------------------------------
    def _norm(self, x, v):
        out = np.linalg.norm(v, axis=-1)
        for disk in self.disk_list:
            mask = self._active(disk, x)
            if np.any(mask):
                out[mask], _ = self._sup(disk, x[mask], v[mask])
        return out

    def _sup(self, disk: Disk, x, v, chunk: int = 2048):
        vals = np.empty(len(x))
        ps = np.empty(len(x))
        for i in range(0, len(x), chunk):
            sl = slice(i, i + chunk)
            vals[sl], ps[sl] = self._sup_chunk(disk, x[sl], v[sl])
        return vals, ps

    def _sup_chunk(self, disk: Disk, x, v):
        n = len(x)
        grid = np.linspace(0.0, TWO_PI, self.p_scan, endpoint=False)
        h = np.einsum("nmk,nk->nm", dual_curve(disk, np.broadcast_to(grid, (n, self.p_scan)), x), v)
        k = np.argmax(h, axis=1)
        dp = TWO_PI / self.p_scan
        a = grid[k] - dp
        b = grid[k] + dp

        def obj(p):
            return np.einsum("nk,nk->n", dual_curve(disk, p[:, None], x)[:, 0], v)

        c = b - GOLDEN * (b - a)
        d = a + GOLDEN * (b - a)
        fc, fd = obj(c), obj(d)
        while np.max(b - a) > 1e-10:
            left = fc > fd
            b = np.where(left, d, b)
            a = np.where(left, a, c)
            new_c = b - GOLDEN * (b - a)
            new_d = a + GOLDEN * (b - a)
            # reuse the surviving interior point
            c, d = np.where(left, new_c, d), np.where(left, c, new_d)
            fnew = obj(np.where(left, c, d))
            fc, fd = np.where(left, fnew, fd), np.where(left, fc, fnew)
        p = 0.5 * (a + b)
        return obj(p), p

    # dual norm ------------------------------------------------------------------
    def dual(self, x, xi, **_):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        x, xi = np.broadcast_arrays(x, xi)
        fstar = np.linalg.norm(xi, axis=1)
        u = xi / fstar[:, None]
        for disk in self.disk_list:
            mask = self._active(disk, x)
            if np.any(mask):
                f, uu, _ = self._gauge(disk, x[mask], xi[mask])
                fstar[mask] = f
                u[mask] = uu
        return fstar, u

    def dual_with_parameter(self, disk: Disk, x, xi):
        return self._gauge(disk, x, xi)

    def _initial_parameter(self, disk: Disk, x, t):
        """Parameter p whose unperturbed differential points along t."""
        w = t - (np.sum(t * disk.center, 1) / np.sum(x * disk.center, 1))[:, None] * x
        return np.arctan2(w @ disk.e2, w @ disk.e1)

    def _gauge(self, disk: Disk, x, xi, tol: float = 1e-13):
        p = self._initial_parameter(disk, x, xi)
        for _ in range(30):
            c, dc = dual_curve(disk, p[:, None], x, derivative=True)
            c, dc = c[:, 0], dc[:, 0]
            g = np.einsum("nk,nk->n", cross(c, xi), x)
            gp = np.einsum("nk,nk->n", cross(dc, xi), x)
            step = -g / gp
            step = np.clip(step, -0.2, 0.2)
            p = p + step
            if np.max(np.abs(step)) < tol:
                break
        c, dc = dual_curve(disk, p[:, None], x, derivative=True)
        c, dc = c[:, 0], dc[:, 0]
        bad = (np.abs(np.einsum("nk,nk->n", cross(c, xi), x)) > 1e-10 * np.linalg.norm(xi, axis=1)) | (
            np.sum(c * xi, 1) <= 0
        )
        if np.any(bad):
            p[bad] = self._gauge_scan(disk, x[bad], xi[bad])
            c, dc = dual_curve(disk, p[:, None], x, derivative=True)
            c, dc = c[:, 0], dc[:, 0]
        fstar = np.linalg.norm(xi, axis=1) / np.linalg.norm(c, axis=1)
        jdc = cross(x, dc)
        u = jdc / np.sum(c * jdc, axis=1)[:, None]
        return fstar, u, p

    def _gauge_scan(self, disk: Disk, x, xi):
        n = len(x)
        grid = np.linspace(0.0, TWO_PI, self.p_scan, endpoint=False)
        c = dual_curve(disk, np.broadcast_to(grid, (n, self.p_scan)), x)
        g = np.einsum("nmk,nk->nm", cross(c, xi[:, None, :]), x)
        pos = np.einsum("nmk,nk->nm", c, xi) > 0
        flip = (np.sign(g) != np.sign(np.roll(g, -1, axis=1))) & pos
        k = np.argmax(flip, axis=1)
        if not np.all(flip[np.arange(n), k]):
            raise RuntimeError("dual curve does not wind around the origin")
        a = grid[k]
        b = a + TWO_PI / self.p_scan
        ga = g[np.arange(n), k]
        for _ in range(60):
            mid = 0.5 * (a + b)
            cm = dual_curve(disk, mid[:, None], x)[:, 0]
            gm = np.einsum("nk,nk->n", cross(cm, xi), x)
            same = np.sign(gm) == np.sign(ga)
            a = np.where(same, mid, a)
            ga = np.where(same, gm, ga)
            b = np.where(same, b, mid)
        return 0.5 * (a + b)

    # geodesic right-hand side ------------------------------------------------------
    def geodesic_rhs(self, x, xi):
        """Co-geodesic vector field.  By the envelope theorem the maximizing
        parameter is frozen while differentiating in x, so the finite
        differences only touch the closed-form dual curve."""
        xdot = xi.copy()
        grad = np.zeros_like(x)
        for disk in self.disk_list:
            mask = self._active(disk, x)
            if not np.any(mask):
                continue
            xm, xim = x[mask], xi[mask]
            f, um, p = self._gauge(disk, xm, xim)
            vm = f[:, None] * um
            xdot[mask] = vm
            grad[mask] = self._frozen_gradient(disk, xm, vm, p)
        xidot = grad - np.sum(grad * x, 1)[:, None] * x - np.sum(xi * xdot, 1)[:, None] * x
        return xdot, xidot

    def _frozen_gradient(self, disk, x, v, p, h: float = 1e-5):
        f0 = np.einsum("nk,nk->n", dual_curve(disk, p[:, None], x)[:, 0], v)
        g = np.zeros_like(x)
        for k in range(3):
            vals = []
            for sgn in (1.0, -1.0):
                xp = x.copy()
                xp[:, k] += sgn * h
                xp = normalize(xp)
                w = v - np.sum(v * xp, 1)[:, None] * xp
                vals.append(np.einsum("nk,nk->n", dual_curve(disk, p[:, None], xp)[:, 0], w))
            g[:, k] = (vals[0] - vals[1]) / (2 * h)
        return f0[:, None] * g

    # envelope functions --------------------------------------------------------------
    def enveloping_function(self, p, x, disk_index: int = 0):
        disk = self.disk_list[disk_index]
        x = np.atleast_2d(np.asarray(x, dtype=float))
        p = np.broadcast_to(np.atleast_1d(np.asarray(p, dtype=float)), (len(x),))
        return enveloping_value(disk, p[:, None], x)[:, 0]

    def differential(self, p, x, disk_index: int = 0):
        disk = self.disk_list[disk_index]
        x = np.atleast_2d(np.asarray(x, dtype=float))
        p = np.broadcast_to(np.atleast_1d(np.asarray(p, dtype=float)), (len(x),))
        return dual_curve(disk, p[:, None], x)[:, 0]

    def sup_distance(self, x, y, disk_index: int = 0, scan: int = 2048):
        """sup_p f~_p(x) - f~_p(y) for interior points of one disk."""
        disk = self.disk_list[disk_index]
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        n = len(x)
        grid = np.linspace(0.0, TWO_PI, scan, endpoint=False)
        pp = np.broadcast_to(grid, (n, scan))
        h = enveloping_value(disk, pp, x) - enveloping_value(disk, pp, y)
        k = np.argmax(h, axis=1)
        a, b = grid[k] - TWO_PI / scan, grid[k] + TWO_PI / scan

        def obj(p):
            return (enveloping_value(disk, p[:, None], x) - enveloping_value(disk, p[:, None], y))[:, 0]

        while np.max(b - a) > 1e-10:
            c = b - GOLDEN * (b - a)
            d = a + GOLDEN * (b - a)
            left = obj(c) > obj(d)
            b = np.where(left, d, b)
            a = np.where(left, a, c)
        return obj(0.5 * (a + b))

    # audits --------------------------------------------------------------------
    def dual_curve_curvature(self, disk: Disk, x, n_dirs: int = 512):
        """Signed curvature of p -> C(p) at each point, normalized so a unit circle gives 1."""
        n = len(x)
        grid = np.linspace(0.0, TWO_PI, n_dirs, endpoint=False)
        pp = np.broadcast_to(grid, (n, n_dirs))
        c, dc = dual_curve(disk, pp, x, derivative=True)
        h = 1e-4
        d2 = (dual_curve(disk, pp + h, x, True)[1] - dual_curve(disk, pp - h, x, True)[1]) / (2 * h)
        xs = x[:, None, :]
        turn = np.sum(cross(dc, d2) * xs, -1)
        wind = np.sign(np.mean(np.sum(cross(c, dc) * xs, -1), axis=1, keepdims=True))
        speed = np.linalg.norm(dc, axis=-1)
        k = wind * turn / speed**3
        # scale by the gauge radius so circles of any size read 1
        return k * np.linalg.norm(c, axis=-1), grid

    def convexity_margins(self, n_points: int = 400, n_directions: int = 512, points=None):
        worst = (np.inf, None, None)
        n_checked = 0
        for disk in self.disk_list:
            if points is None:
                pts = _disk_points(disk, n_points)
            else:
                pts = np.atleast_2d(points)
                pts = pts[pts @ disk.center >= np.cos(disk.radius)]
            if len(pts) == 0:
                continue
            n_checked += len(pts)
            k, grid = self.dual_curve_curvature(disk, pts, n_directions)
            i, j = np.unravel_index(np.argmin(k), k.shape)
            if k[i, j] < worst[0]:
                c = dual_curve(disk, np.array([[grid[j]]]), pts[i : i + 1])[0, 0]
                worst = (float(k[i, j]), pts[i].tolist(), c.tolist())
        if worst[1] is None:
            return ConvexityReport(1.0, True, [], [], 0, n_directions)
        return ConvexityReport(worst[0], worst[0] > 0, worst[1], worst[2], n_checked, n_directions)

    def describe(self) -> dict:
        d = {"kind": self.kind}
        d.update(self.family.to_dict())
        return d


def _disk_points(disk: Disk, n: int) -> np.ndarray:
    """Points filling a disk: Fibonacci points of the cap plus every bump support."""
    m = int(np.ceil(n / max((1.0 - np.cos(disk.radius)) / 2.0, 1e-6)))
    pts = fibonacci_sphere(m)
    keep = [pts[pts @ disk.center >= np.cos(disk.radius)]]
    for b in disk.bumps:
        cap = 2.0 * np.arcsin(b.sigma_x / 2)
        m = int(np.ceil(n / ((1.0 - np.cos(cap)) / 2.0)))
        q = fibonacci_sphere(m)
        # rotate the Fibonacci grid so it is centred on the bump
        q = q[q[:, 2] >= np.cos(cap)]
        keep.append(_rotate_from_pole(q, b.center))
    return np.concatenate(keep)


def _rotate_from_pole(q, target):
    z = np.array([0.0, 0.0, 1.0])
    target = normalize(target)
    axis = cross(z, target)
    s = np.linalg.norm(axis)
    c = float(z @ target)
    if s < 1e-14:
        return q if c > 0 else q * np.array([1.0, -1.0, -1.0])
    k = axis / s
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    r = np.eye(3) + s * kx + (1 - c) * kx @ kx
    return q @ r.T


def build_metric(fam: EnvelopingFamily, audit_points: int = 300, audit_dirs: int = 512) -> EnvelopingMetric:
    """Envelope metric of the family; raises if any audited fiber fails convexity."""
    metric = EnvelopingMetric(fam)
    if fam.bumps:
        rep = metric.convexity_margins(audit_points, audit_dirs)
        if not rep.passed:
            raise AmplitudeTooLargeError(
                f"amplitude too large: dual curve curvature {rep.margin:.3g} at x={rep.worst_point}",
                fiber=rep.worst_point,
                margin=rep.margin,
            )
    return metric


def gradient_geodesic(
    fam_or_metric, p: float, start, arc: float, n_out: int = 400, disk_index: int = 0, rtol: float = 1e-11
):
    """Integral curve of the F~-gradient of f~_p from ``start``, clipped at the disk boundary.

    Returns ``(curve_nodes, arclength, exited)``; the parameter is F~-arclength
    since the gradient is F~-unit.
    """
    metric = fam_or_metric if isinstance(fam_or_metric, EnvelopingMetric) else EnvelopingMetric(fam_or_metric)
    disk = metric.disk_list[disk_index]
    start = normalize(np.asarray(start, dtype=float))
    if start @ disk.center < np.cos(disk.radius):
        raise OutsideDiskError("start lies outside the disk")

    def rhs(_, y):
        x = normalize(y)[None]
        c, dc = dual_curve(disk, np.array([[p]]), x, derivative=True)
        jdc = cross(x[0], dc[0, 0])
        return jdc / np.dot(c[0, 0], jdc)

    def leave(_, y):
        return normalize(y) @ disk.center - np.cos(disk.radius)

    leave.terminal = True
    leave.direction = -1
    sol = solve_ivp(rhs, (0.0, arc), start, method="DOP853", rtol=rtol, atol=rtol, events=leave, dense_output=True)
    s_end = float(sol.t[-1])
    s = np.linspace(0.0, s_end, n_out)
    nodes = normalize(sol.sol(s).T)
    return nodes, s, sol.status == 1


def planar_content(metric: EnvelopingMetric, x, n_rays: int = 4096) -> float:
    """Mahler product of the unit ball of the metric at x (computed on the dual ball)."""
    x = normalize(np.asarray(x, dtype=float))
    b1, b2 = (b[0] for b in tangent_frame(x[None]))

    def dual_norm_at(t):
        t = np.asarray(t, dtype=float)
        e = np.cos(t).reshape(-1)[:, None] * b1 + np.sin(t).reshape(-1)[:, None] * b2
        return metric.dual_norm(np.broadcast_to(x, e.shape), e).reshape(t.shape)

    return mahler_product(PlanarNorm(dual_norm_at), n_rays)


def content_fingerprint(family: EnvelopingFamily, n_points: int = 24) -> float:
    """Minimum planar content over points of the bump supports."""
    metric = EnvelopingMetric(family)
    disk = metric.disk_list[0]
    pts = []
    for b in disk.bumps:
        q = fibonacci_sphere(int(n_points / ((1.0 - np.cos(b.support_radius)) / 2.0)))
        q = q[q[:, 2] >= np.cos(0.9 * b.support_radius)]
        pts.append(_rotate_from_pole(q, b.center))
    pts = np.concatenate(pts) if pts else disk.center[None]
    return min(planar_content(metric, x) for x in pts)


def load_family(path) -> EnvelopingFamily:
    with open(path) as fh:
        return EnvelopingFamily.from_dict(json.load(fh))
