"""Deformation maps of the unit ball, test fields and variation constructors.

All evaluation is vectorized: ``value(x)`` maps ``(n, 3) -> (n, 3)`` and
``gradient(x)`` maps ``(n, 3) -> (n, 3, 3)`` with ``gradient[k, i, j] =
d w_i / d x_j``.  Maps are immutable after construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import optimize

from . import tensor3 as t3
from .quadrature import cutoff, smooth_step

KINDS = ("none", "discontinuity", "zero")


def _pts(x):
    x = np.asarray(x, dtype=float)
    return x.reshape(-1, 3)


def _radius(x):
    return np.sqrt(np.einsum("ni,ni->n", x, x))


def smoothstep5(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * t * (t * (6.0 * t - 15.0) + 10.0)


def smoothstep5_deriv(t):
    t = np.clip(t, 0.0, 1.0)
    return 30.0 * t * t * (t - 1.0) ** 2


def smooth_step_deriv(t):
    t = np.asarray(t, dtype=float)
    inside = (t > 0) & (t < 1)
    tt = np.where(inside, t, 0.5)
    a = np.exp(-1.0 / tt)
    b = np.exp(-1.0 / (1.0 - tt))
    da = a / tt**2
    db = -b / (1.0 - tt) ** 2
    d = (da * (a + b) - a * (da + db)) / (a + b) ** 2
    return np.where(inside, d, 0.0)


def cutoff_deriv(s):
    return -2.0 * smooth_step_deriv(2.0 * np.asarray(s) - 1.0)


@dataclass(frozen=True)
class SingularityDescriptor:
    kind: str = "none"
    location: tuple = (0.0, 0.0, 0.0)
    lower_bound: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError("unknown singularity kind %r" % self.kind)
        loc = tuple(float(c) for c in np.asarray(self.location, dtype=float).reshape(3))
        if math.sqrt(sum(c * c for c in loc)) >= 1:
            raise ValueError("singularity must lie inside the unit ball")
        object.__setattr__(self, "location", loc)
        if self.kind == "discontinuity" and not (self.lower_bound and self.lower_bound > 0):
            raise ValueError("a discontinuity needs a positive lower bound on |w|")

    @property
    def point(self):
        return np.array(self.location)


class DeformationMap:
    """Base class; subclasses provide ``value`` and usually ``gradient``."""

    label = "map"
    singularity = SingularityDescriptor()
    #: radii of spheres about the origin across which the map is not smooth
    interfaces: tuple = ()
    #: radii of spheres about the singular point across which the map is not smooth
    local_interfaces: tuple = ()

    def value(self, x):
        raise NotImplementedError

    def gradient(self, x):
        return fd_gradient(self.value, x)

    def __call__(self, x):
        return self.value(x)

    @property
    def singular_points(self):
        """Points the quadrature must treat as singular (origin always included)."""
        pts = [np.zeros(3)]
        if self.singularity.kind != "none":
            p = self.singularity.point
            if np.linalg.norm(p) > 1e-14:
                pts.append(p)
        return pts

    def __repr__(self):
        return "<%s %s>" % (type(self).__name__, self.label)


def fd_gradient(fun, x, step=1e-6):
    """Centered differences with step ``step * max(1, |x|)``."""
    x = _pts(x)
    h = step * np.maximum(1.0, _radius(x))
    cols = []
    for j in range(3):
        e = np.zeros(3)
        e[j] = 1.0
        d = h[:, None] * e
        cols.append((fun(x + d) - fun(x - d)) / (2.0 * h[:, None]))
    return np.stack(cols, axis=-1)


# ---------------------------------------------------------------- radial maps


@dataclass(frozen=True)
class Profile:
    r: Callable
    dr: Callable | None = None
    breaks: tuple = ()
    label: str = "profile"


def linear_profile():
    return Profile(lambda R: np.asarray(R, dtype=float), lambda R: np.ones_like(R, dtype=float), (), "R")


def cavity_profile(lam):
    if not 0 < lam < 1:
        raise ValueError("cavity radius must lie in (0, 1)")
    return Profile(
        lambda R: np.maximum(lam, R),
        lambda R: np.where(R > lam, 1.0, 0.0),
        (lam,),
        "max(%g,R)" % lam,
    )


def power_profile(k):
    if k <= 0:
        raise ValueError("power must be positive")
    return Profile(lambda R: np.asarray(R, dtype=float) ** k, lambda R: k * np.asarray(R, dtype=float) ** (k - 1), (), "R^%g" % k)


class RadialMap(DeformationMap):
    """``u(x) = r(|x|) x/|x|``."""

    def __init__(self, profile):
        if not isinstance(profile, Profile):
            profile = Profile(profile)
        r1 = float(np.asarray(profile.r(np.array([1.0])))[0])
        if abs(r1 - 1.0) > 1e-12:
            raise ValueError("radial profile must satisfy r(1) = 1 (got %r)" % r1)
        self.profile = profile
        self.label = "radial[%s]" % profile.label
        self.interfaces = tuple(profile.breaks)
        r0 = float(np.asarray(profile.r(np.array([0.0])))[0])
        self._slope0 = float(np.asarray(self._dr(np.array([0.0])))[0])
        if r0 > 0:
            grid = np.linspace(0.0, 1.0, 2001)
            self.singularity = SingularityDescriptor("discontinuity", (0, 0, 0), float(np.min(profile.r(grid))))
        elif self._slope0 > 0:
            self.singularity = SingularityDescriptor("zero", (0, 0, 0))
        else:
            # continuous with a degenerate zero: |w| has no positive lower bound and det grad w(0) = 0
            self.singularity = SingularityDescriptor("none", (0, 0, 0))

    def _dr(self, R):
        if self.profile.dr is not None:
            return self.profile.dr(R)
        h = 1e-6 * np.maximum(1.0, R)
        return (self.profile.r(R + h) - self.profile.r(R - h)) / (2 * h)

    def value(self, x):
        x = _pts(x)
        R = _radius(x)
        Rs = np.where(R > 0, R, 1.0)
        return np.where(R[:, None] > 0, (self.profile.r(Rs) / Rs)[:, None] * x, 0.0)

    def gradient(self, x):
        x = _pts(x)
        R = _radius(x)
        Rs = np.where(R > 0, R, 1.0)
        xb = x / Rs[:, None]
        r = self.profile.r(Rs)
        g = (self._dr(Rs) - r / Rs)[:, None, None] * t3.outer(xb, xb) + (r / Rs)[:, None, None] * t3.IDENTITY
        # at the origin only the zero-type limit r'(0) * Identity makes sense
        return np.where(R[:, None, None] > 0, g, self._slope0 * t3.IDENTITY)


def radial_map(profile):
    return RadialMap(profile)


def identity_map():
    m = RadialMap(linear_profile())
    m.label = "identity"
    return m


def cavity_map(lam):
    """Radial map opening a cavity of radius ``lam`` at the origin."""
    return RadialMap(cavity_profile(lam))


# ----------------------------------------------------- a built-in diffeomorphism


class TwistShift(DeformationMap):
    """Smooth diffeomorphism of the ball fixing 0 and the boundary.

    ``f = S o T`` with ``T(x) = x + mu (R^2 - R^4) e1`` and ``S`` a rotation
    about e3 by ``kappa (1 - R^2)^2 x3``.  Requires ``mu < 1/2`` so that T is
    a diffeomorphism.
    """

    def __init__(self, kappa=1.0, mu=0.2):
        if not 0 <= mu < 0.5:
            raise ValueError("mu must lie in [0, 1/2)")
        self.kappa = float(kappa)
        self.mu = float(mu)
        self.label = "twist_shift(kappa=%g,mu=%g)" % (kappa, mu)
        self.singularity = SingularityDescriptor("zero", (0, 0, 0))

    def _T(self, x):
        R2 = np.einsum("ni,ni->n", x, x)
        y = x.copy()
        y[:, 0] += self.mu * (R2 - R2 * R2)
        return y

    def _T_grad(self, x):
        R2 = np.einsum("ni,ni->n", x, x)
        g = np.broadcast_to(t3.IDENTITY, (x.shape[0], 3, 3)).copy()
        # d/dx (R^2 - R^4) = (2 - 4 R^2) x
        g[:, 0, :] += self.mu * (2.0 - 4.0 * R2)[:, None] * x
        return g

    def _angle(self, y):
        R2 = np.einsum("ni,ni->n", y, y)
        return self.kappa * (1.0 - R2) ** 2 * y[:, 2]

    def _S(self, y):
        a = self._angle(y)
        c, s = np.cos(a), np.sin(a)
        out = y.copy()
        out[:, 0] = c * y[:, 0] - s * y[:, 1]
        out[:, 1] = s * y[:, 0] + c * y[:, 1]
        return out

    def _S_grad(self, y):
        R2 = np.einsum("ni,ni->n", y, y)
        a = self._angle(y)
        c, s = np.cos(a), np.sin(a)
        n = y.shape[0]
        rot = np.zeros((n, 3, 3))
        rot[:, 0, 0], rot[:, 0, 1] = c, -s
        rot[:, 1, 0], rot[:, 1, 1] = s, c
        rot[:, 2, 2] = 1.0
        drot_y = np.zeros((n, 3))
        drot_y[:, 0] = -s * y[:, 0] - c * y[:, 1]
        drot_y[:, 1] = c * y[:, 0] - s * y[:, 1]
        grad_a = self.kappa * (-4.0 * (1.0 - R2) * y[:, 2])[:, None] * y
        grad_a[:, 2] += self.kappa * (1.0 - R2) ** 2
        return rot + t3.outer(drot_y, grad_a)

    def value(self, x):
        return self._S(self._T(_pts(x)))

    def gradient(self, x):
        x = _pts(x)
        return t3.matmul(self._S_grad(self._T(x)), self._T_grad(x))


# ---------------------------------------------------------------- hold map


def _sphere_sample(n=4000):
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    phi = math.pi * (3.0 - math.sqrt(5.0)) * i
    s = np.sqrt(1.0 - z * z)
    return np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=1)


def _sphere_min(fun, radius):
    """Minimum of a scalar field on a sphere about 0: dense sample, then local polish."""
    dirs = _sphere_sample()
    vals = fun(radius * dirs)
    best = dirs[np.argmin(vals)]
    th0 = math.acos(max(-1.0, min(1.0, best[2])))
    ph0 = math.atan2(best[1], best[0])

    def obj(a):
        d = np.array([[math.sin(a[0]) * math.cos(a[1]), math.sin(a[0]) * math.sin(a[1]), math.cos(a[0])]])
        return float(fun(radius * d)[0])

    res = optimize.minimize(obj, [th0, ph0], method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-14})
    return min(float(vals.min()), float(res.fun))


class HoldMap(DeformationMap):
    """``w = f(rho x/|x|)`` inside radius ``rho`` and ``w = f`` outside."""

    def __init__(self, f=None, rho=0.5):
        if not 0 < rho < 1:
            raise ValueError("rho must lie in (0, 1)")
        self.f = f if f is not None else identity_map()
        self.rho = float(rho)
        self.label = "hold[%s,rho=%g]" % (self.f.label, rho)
        self.interfaces = (self.rho,)
        tau0 = _sphere_min(lambda y: _radius(self.f.value(y)), self.rho)
        self.singularity = SingularityDescriptor("discontinuity", (0, 0, 0), tau0)

    def value(self, x):
        x = _pts(x)
        R = _radius(x)
        inner = R < self.rho
        y = x.copy()
        y[inner] = self.rho * x[inner] / R[inner, None]
        return self.f.value(y)

    def gradient(self, x):
        x = _pts(x)
        R = _radius(x)
        inner = R < self.rho
        out = np.empty((x.shape[0], 3, 3))
        if np.any(~inner):
            out[~inner] = self.f.gradient(x[~inner])
        if np.any(inner):
            xb = x[inner] / R[inner, None]
            proj = t3.IDENTITY - t3.outer(xb, xb)
            out[inner] = (self.rho / R[inner])[:, None, None] * t3.matmul(self.f.gradient(self.rho * xb), proj)
        return out


def hold_map(f=None, rho=0.5):
    return HoldMap(f, rho)


# ---------------------------------------------------------------- circle map


class CircleMap(DeformationMap):
    """``tau w/|w|`` where ``|w| <= tau``, else ``w``."""

    def __init__(self, w, tau):
        if tau <= 0:
            raise ValueError("tau must be positive")
        if w.singularity.kind == "none":
            raise ValueError("circle map needs a map with a zero or a discontinuity")
        self.w = w
        self.tau = float(tau)
        self.label = "circle[%s,tau=%g]" % (w.label, tau)
        self.interfaces = tuple(w.interfaces)
        self.singularity = SingularityDescriptor("discontinuity", w.singularity.location, self.tau)
        p = w.singularity.point
        if w.singularity.kind == "zero" and np.linalg.norm(p) > 0:
            # {|w| <= tau} is a ball about the zero when grad w there is a scaled rotation
            A = w.gradient(p.reshape(1, 3))[0]
            s2 = np.linalg.svd(A, compute_uv=False)
            if s2[0] - s2[-1] < 1e-10 * s2[0]:
                self.local_interfaces = (self.tau / s2[0],)

    def value(self, x):
        v = self.w.value(x)
        n = _radius(v)
        inner = n <= self.tau
        out = v.copy()
        out[inner] = self.tau * v[inner] / n[inner, None]
        return out

    def gradient(self, x):
        x = _pts(x)
        v = self.w.value(x)
        g = self.w.gradient(x)
        n = _radius(v)
        inner = n <= self.tau
        if np.any(inner):
            vb = v[inner] / n[inner, None]
            proj = t3.IDENTITY - t3.outer(vb, vb)
            g = g.copy()
            g[inner] = (self.tau / n[inner])[:, None, None] * t3.matmul(proj, g[inner])
        return g


def circle_map(w, tau):
    return CircleMap(w, tau)


# ---------------------------------------------------------------- path gamma


class PathGamma(DeformationMap):
    """Circle map of ``x -> |x|^t w(x |x|^-t)`` for a hold map ``w``."""

    def __init__(self, w, tau, t):
        if not isinstance(w, HoldMap):
            raise TypeError("path_gamma expects a map built by hold_map")
        if not 0 <= t <= 1:
            raise ValueError("t must lie in [0, 1]")
        if tau <= 0:
            raise ValueError("tau must be positive")
        self.w = w
        self.tau = float(tau)
        self.t = float(t)
        self.label = "gamma[%s,tau=%g,t=%g]" % (w.label, tau, t)
        self.interfaces = (w.rho ** (1.0 / (1.0 - t)),) if t < 1 else ()
        self.singularity = SingularityDescriptor("discontinuity", (0, 0, 0), min(self.tau, w.singularity.lower_bound))

    def _parts(self, x):
        x = _pts(x)
        R = _radius(x)
        Rt = R ** self.t
        alpha = x / Rt[:, None]
        wa = self.w.value(alpha)
        v = Rt[:, None] * wa
        inside = _radius(v) < self.tau
        return x, R, Rt, alpha, wa, v, inside

    def value(self, x):
        x, R, Rt, alpha, wa, v, inside = self._parts(x)
        out = v.copy()
        na = _radius(wa[inside])
        out[inside] = self.tau * wa[inside] / na[:, None]
        return out

    def gradient(self, x):
        x, R, Rt, alpha, wa, v, inside = self._parts(x)
        t = self.t
        xb = x / R[:, None]
        ga = self.w.gradient(alpha)
        out = (t * R ** (t - 1.0))[:, None, None] * t3.outer(wa, xb) + t3.matmul(
            ga, t3.IDENTITY - t * t3.outer(xb, xb)
        )
        if np.any(inside):
            wi = wa[inside]
            nw = _radius(wi)
            wb = wi / nw[:, None]
            grad_alpha = (R[inside] ** (-t))[:, None, None] * (t3.IDENTITY - t * t3.outer(xb[inside], xb[inside]))
            out[inside] = (self.tau / nw)[:, None, None] * t3.matmul(
                t3.IDENTITY - t3.outer(wb, wb), t3.matmul(ga[inside], grad_alpha)
            )
        return out

    def velocity(self, x):
        """Analytic ``d gamma / dt``."""
        x, R, Rt, alpha, wa, v, inside = self._parts(x)
        lnR = np.log(R)
        ga_alpha = t3.matvec(self.w.gradient(alpha), alpha)
        out = (Rt * lnR)[:, None] * (wa - ga_alpha)
        if np.any(inside):
            wi = wa[inside]
            nw = _radius(wi)
            wb = wi / nw[:, None]
            out[inside] = (self.tau * lnR[inside] / nw)[:, None] * t3.matvec(
                t3.outer(wb, wb) - t3.IDENTITY, ga_alpha[inside]
            )
        return out

    def in_U(self, x):
        return self._parts(x)[-1]


def path_gamma(w, tau, t):
    """Return ``(gamma(.; t), velocity)`` where velocity is a callable field."""
    g = PathGamma(w, tau, t)
    return g, g.velocity


# ---------------------------------------------------------------- test fields


class TestField:
    """Smooth bump ``phi(x) = v chi(|x - c| / r) (1 - chi(|x| / (2 d0)))``.

    ``chi`` is the C-infinity cutoff (1 on [0, 1/2], 0 beyond 1); ``phi``
    vanishes outside ``B(c, r)`` and on ``B(0, d0)``.
    """

    __test__ = False

    def __init__(self, center, radius, vector, dead_zone=0.0):
        self.center = np.asarray(center, dtype=float).reshape(3)
        self.radius = float(radius)
        self.vector = np.asarray(vector, dtype=float).reshape(3)
        self.dead_zone = float(dead_zone)
        if self.radius <= 0:
            raise ValueError("support radius must be positive")
        if np.linalg.norm(self.center) + self.radius >= 1:
            raise ValueError("test field support must lie inside the unit ball")

    @property
    def breaks(self):
        """Radii about the origin where the field changes rapidly (panel hints)."""
        out = []
        if np.linalg.norm(self.center) == 0:
            out += [0.5 * self.radius, self.radius]
        if self.dead_zone > 0:
            out += [self.dead_zone, 2.0 * self.dead_zone]
        return tuple(out)

    def _scalar(self, x):
        x = _pts(x)
        d = x - self.center
        s = _radius(d) / self.radius
        a = cutoff(s)
        with np.errstate(invalid="ignore", divide="ignore"):
            grad_a = np.where(s[:, None] > 0, cutoff_deriv(s)[:, None] * d / (self.radius * np.maximum(s, 1e-300)[:, None] * self.radius), 0.0)
        if self.dead_zone > 0:
            R = _radius(x)
            with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
                u = R / (2.0 * self.dead_zone)
                b = 1.0 - cutoff(u)
                # the dead-zone factor is flat for u >= 1; tiny dead zones overflow u there
                live = (R > 0) & (u < 1.0)
                grad_b = np.where(live[:, None], -cutoff_deriv(u)[:, None] * x / (2.0 * self.dead_zone * np.maximum(R, 1e-300)[:, None]), 0.0)
            return a * b, grad_a * b[:, None] + a[:, None] * grad_b
        return a, grad_a

    def value(self, x):
        s, _ = self._scalar(x)
        return s[:, None] * self.vector

    def gradient(self, x):
        _, g = self._scalar(x)
        return t3.outer(np.broadcast_to(self.vector, g.shape), g)

    __call__ = value

    def pinned_value(self, x0):
        return self.value(np.asarray(x0, dtype=float).reshape(1, 3))[0]


def bump_field(center, radius, vector, dead_zone=0.0):
    return TestField(center, radius, vector, dead_zone)


# ---------------------------------------------------------------- inner variation


def track_zero(phi, eps, x0, tol=1e-13, maxiter=50):
    """Solve ``x + eps phi(x) = x0`` by Newton from ``x0``."""
    x0 = np.asarray(x0, dtype=float).reshape(1, 3)
    x = x0.copy()
    for _ in range(maxiter):
        r = x + eps * phi.value(x) - x0
        if np.max(np.abs(r)) < tol:
            return x[0]
        J = t3.IDENTITY + eps * phi.gradient(x)
        x = x - np.linalg.solve(J, r[..., None])[..., 0]
    raise RuntimeError("zero tracking did not converge for eps=%g" % eps)


class InnerVariation(DeformationMap):
    """``w_eps(x) = w(x + eps phi(x))``."""

    def __init__(self, w, phi, eps, n_check=20000, seed=0):
        self.w = w
        self.phi = phi
        self.eps = float(eps)
        self.label = "inner[%s,eps=%g]" % (w.label, eps)
        self.interfaces = tuple(w.interfaces) + tuple(getattr(phi, "breaks", ()))
        if eps != 0:
            rng = np.random.default_rng(seed)
            pts = _ball_sample(rng, n_check)
            pts = np.concatenate([pts, phi.center + phi.radius * _ball_sample(rng, n_check)])
            pts = pts[_radius(pts) < 1]
            y = pts + self.eps * phi.value(pts)
            if np.max(_radius(y)) >= 1:
                raise ValueError("x + eps*phi(x) leaves the unit ball for eps=%g" % eps)
        kind = w.singularity.kind
        if kind == "none" or eps == 0:
            self.singularity = w.singularity
        else:
            xe = track_zero(phi, self.eps, w.singularity.point)
            self.singularity = SingularityDescriptor(kind, tuple(xe), w.singularity.lower_bound)

    def value(self, x):
        x = _pts(x)
        return self.w.value(x + self.eps * self.phi.value(x))

    def gradient(self, x):
        x = _pts(x)
        y = x + self.eps * self.phi.value(x)
        return t3.matmul(self.w.gradient(y), t3.IDENTITY + self.eps * self.phi.gradient(x))


def inner_variation(w, phi, eps):
    return InnerVariation(w, phi, eps)


def _ball_sample(rng, n):
    v = rng.normal(size=(n, 3))
    v /= _radius(v)[:, None]
    return v * rng.uniform(0, 1, size=n)[:, None] ** (1.0 / 3.0)


# ---------------------------------------------------------------- small-zero family


class SmallZeroMap(DeformationMap):
    """``g = rho^{-1}`` with ``rho(y) = y + tau phi(y)``.

    ``phi = e1 * ramp(|y|)``: 1 on ``B(0, 3 tau)``, 0 outside ``B(0, N tau)``.
    The ramp's slope is a plateau with quintic shoulders occupying a fraction
    ``shoulder`` of the transition at each end, which keeps the peak slope at
    ``1 / ((1 - shoulder)(N - 3) tau)``.
    """

    shoulder = 0.15

    def __init__(self, tau, N=8, tol=1e-12, maxiter=50):
        if N < 4:
            raise ValueError("N must be at least 4")
        if not 0 < tau or N * tau >= 1:
            raise ValueError("need 0 < tau < 1/N so that the bump is supported in the ball")
        self.tau = float(tau)
        self.N = int(N)
        self.tol = tol
        self.maxiter = maxiter
        self.label = "small_zero(tau=%g,N=%d)" % (tau, N)
        self.singularity = SingularityDescriptor("zero", (self.tau, 0.0, 0.0))
        self.inner_radius = 3.0 * self.tau
        self.outer_radius = self.N * self.tau

    @property
    def max_bump_gradient(self):
        return 1.0 / ((1.0 - self.shoulder) * (self.N - 3) * self.tau)

    def _ramp(self, s):
        """Ramp value and derivative in |y|."""
        a = self.shoulder
        L = self.outer_radius - self.inner_radius
        u = np.clip((s - self.inner_radius) / L, 0.0, 1.0)

        def q(t):
            return t**4 * (t * (t - 3.0) + 2.5)

        S = np.where(
            u < a,
            a * q(u / a),
            np.where(u <= 1 - a, 0.5 * a + (u - a), (1.0 - a) - a * q((1.0 - u) / a)),
        ) / (1.0 - a)
        slope = np.where(u < a, smoothstep5(u / a), np.where(u <= 1 - a, 1.0, smoothstep5((1.0 - u) / a)))
        slope = np.where((s <= self.inner_radius) | (s >= self.outer_radius), 0.0, slope)
        return 1.0 - S, -slope / ((1.0 - a) * L)

    def bump(self, y):
        y = _pts(y)
        r, _ = self._ramp(_radius(y))
        out = np.zeros_like(y)
        out[:, 0] = r
        return out

    def bump_gradient(self, y):
        y = _pts(y)
        s = _radius(y)
        _, dr = self._ramp(s)
        with np.errstate(invalid="ignore", divide="ignore"):
            yb = np.where(s[:, None] > 0, y / np.maximum(s, 1e-300)[:, None], 0.0)
        g = np.zeros((y.shape[0], 3, 3))
        g[:, 0, :] = dr[:, None] * yb
        return g

    def forward(self, y):
        y = _pts(y)
        return y + self.tau * self.bump(y)

    def value(self, x):
        x = _pts(x)
        y = x.copy()
        active = np.ones(x.shape[0], dtype=bool)
        for _ in range(self.maxiter):
            idx = np.nonzero(active)[0]
            if idx.size == 0:
                return y
            r = self.forward(y[idx]) - x[idx]
            done = np.max(np.abs(r), axis=1) < self.tol
            active[idx[done]] = False
            idx = idx[~done]
            if idx.size == 0:
                return y
            J = t3.IDENTITY + self.tau * self.bump_gradient(y[idx])
            y[idx] = y[idx] - np.linalg.solve(J, r[~done][..., None])[..., 0]
        bad = np.nonzero(active)[0]
        raise RuntimeError("Newton inversion failed to converge at x=%s" % x[bad[0]].tolist())

    def gradient(self, x):
        y = self.value(x)
        return np.linalg.inv(t3.IDENTITY + self.tau * self.bump_gradient(y))


def small_zero_map(tau, N=8):
    return SmallZeroMap(tau, N)


# ---------------------------------------------------------------- mollified blend


class MollifiedBlend(DeformationMap):
    """``(1 - eta_j) w + eta_j w_l`` near a discontinuity of ``w``.

    ``eta_j`` is a quintic smoothstep in ``|x - x0|`` rising from 0 at
    ``2^-(j+2)`` to 1 at ``2^-(j+1)``.  ``w_l`` is ``w`` (extended by the
    identity outside the ball) convolved with the separable triangular kernel
    of half-width ``1/l``, evaluated pointwise with a fixed tensor Gauss rule.
    """

    def __init__(self, w, j, l=None, kernel_order=3):
        if w.singularity.kind != "discontinuity":
            raise ValueError("mollified blend needs a map with a discontinuity")
        j = int(j)
        l = int(l) if l is not None else 2 ** (j + 4)
        if l <= 2 ** (j + 3):
            raise ValueError("need l > 2^(j+3) (got l=%d, j=%d)" % (l, j))
        self.w = w
        self.j = j
        self.l = l
        self.x0 = w.singularity.point
        self.inner = 2.0 ** -(j + 2)
        self.outer = 2.0 ** -(j + 1)
        self.label = "blend[%s,j=%d,l=%d]" % (w.label, j, l)
        self.singularity = SingularityDescriptor("discontinuity", w.singularity.location, 0.5 * w.singularity.lower_bound)
        h = 1.0 / l
        x, wt = np.polynomial.legendre.leggauss(kernel_order)
        # triangular kernel l*(1 - l|s|) on [-h, h], split at 0
        s_pos = 0.5 * h * (x + 1.0)
        w_pos = 0.5 * h * wt * l * (1.0 - l * s_pos)
        s1 = np.concatenate([-s_pos, s_pos])
        w1 = np.concatenate([w_pos, w_pos])
        grid = np.stack(np.meshgrid(s1, s1, s1, indexing="ij"), axis=-1).reshape(-1, 3)
        weights = (w1[:, None, None] * w1[None, :, None] * w1[None, None, :]).reshape(-1)
        self._offsets = grid
        self._weights = weights / weights.sum()
        rad = [r for r in w.interfaces]
        reach = math.sqrt(3.0) * h
        self.interfaces = tuple(sorted(set([self.inner, self.outer] + rad + [r - reach for r in rad] + [r + reach for r in rad])))

    def _extended(self, fun_value, x):
        inside = _radius(x) < 1.0
        out = x.copy()
        if np.any(inside):
            out[inside] = fun_value(x[inside])
        return out

    def _extended_grad(self, x):
        inside = _radius(x) < 1.0
        out = np.broadcast_to(t3.IDENTITY, (x.shape[0], 3, 3)).copy()
        if np.any(inside):
            out[inside] = self.w.gradient(x[inside])
        return out

    def smoothed(self, x):
        """``w_l`` and its gradient."""
        x = _pts(x)
        n, m = x.shape[0], self._offsets.shape[0]
        pts = (x[:, None, :] - self._offsets[None, :, :]).reshape(-1, 3)
        val = self._extended(self.w.value, pts).reshape(n, m, 3)
        grad = self._extended_grad(pts).reshape(n, m, 3, 3)
        return np.einsum("nmi,m->ni", val, self._weights), np.einsum("nmij,m->nij", grad, self._weights)

    def eta(self, x):
        x = _pts(x)
        d = x - self.x0
        s = _radius(d)
        t = (s - self.inner) / (self.outer - self.inner)
        with np.errstate(invalid="ignore", divide="ignore"):
            db = np.where(s[:, None] > 0, d / np.maximum(s, 1e-300)[:, None], 0.0)
        return smoothstep5(t), (smoothstep5_deriv(t) / (self.outer - self.inner))[:, None] * db

    def value(self, x):
        x = _pts(x)
        e, _ = self.eta(x)
        out = self.w.value(x)
        act = e > 0
        if np.any(act):
            wl, _ = self.smoothed(x[act])
            out[act] = out[act] + e[act, None] * (wl - out[act])
        return out

    def gradient(self, x):
        x = _pts(x)
        e, de = self.eta(x)
        g = self.w.gradient(x)
        act = e > 0
        if np.any(act):
            wl, gl = self.smoothed(x[act])
            w0 = self.w.value(x[act])
            g[act] = (1.0 - e[act])[:, None, None] * g[act] + e[act][:, None, None] * gl + t3.outer(wl - w0, de[act])
        return g


def mollified_blend(w, j, l=None):
    return MollifiedBlend(w, j, l)


# ---------------------------------------------------------------- checks


def sphere_grid_26():
    d = np.array([(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1) if (i, j, k) != (0, 0, 0)], dtype=float)
    return d / _radius(d)[:, None]


def boundary_defect(w):
    """Max ``|w(x) - x|`` over the 26-point boundary grid."""
    x = sphere_grid_26() * (1.0 - 1e-15)
    return float(np.max(_radius(w.value(x) - x)))


def gradient_defect(w, n=100, seed=0, avoid=0.05):
    """Max relative gap between analytic and finite-difference gradients."""
    rng = np.random.default_rng(seed)
    pts = _ball_sample(rng, 20 * n)
    keep = _radius(pts - w.singularity.point) > avoid
    keep &= _radius(pts) > avoid
    keep &= _radius(pts) < 1 - avoid
    for r in w.interfaces:
        keep &= np.abs(_radius(pts) - r) > avoid
    pts = pts[keep][:n]
    ga = w.gradient(pts)
    gf = fd_gradient(w.value, pts)
    scale = np.maximum(1.0, np.max(np.abs(ga), axis=(1, 2)))
    return float(np.max(np.max(np.abs(ga - gf), axis=(1, 2)) / scale))


def descriptor_defect(w, n=10000, seed=1):
    """Check the singularity descriptor on a sample; returns a dict of findings."""
    rng = np.random.default_rng(seed)
    pts = _ball_sample(rng, n)
    s = w.singularity
    pts = pts[_radius(pts - s.point) > 1e-6]
    vals = _radius(w.value(pts))
    out = {"kind": s.kind, "min_abs_w": float(vals.min())}
    if s.kind == "discontinuity":
        out["ok"] = bool(vals.min() >= s.lower_bound * (1 - 1e-12))
    elif s.kind == "zero":
        x0 = s.point.reshape(1, 3)
        out["abs_w_at_x0"] = float(_radius(w.value(x0))[0])
        out["det_at_x0"] = float(t3.det(w.gradient(x0))[0])
        out["ok"] = out["abs_w_at_x0"] < 1e-12 and out["det_at_x0"] > 0
    else:
        out["ok"] = True
    return out


# ---------------------------------------------------------------- outer variation


class OuterVariation(DeformationMap):
    """``w + eps phi``."""

    def __init__(self, w, phi, eps):
        self.w = w
        self.phi = phi
        self.eps = float(eps)
        self.label = "outer[%s,eps=%g]" % (w.label, eps)
        self.interfaces = tuple(w.interfaces) + tuple(getattr(phi, "breaks", ()))
        s = w.singularity
        if s.kind == "zero" and eps != 0:
            raise ValueError("outer variations of a map with a zero move the zero; use inner_variation")
        if s.kind == "discontinuity":
            bound = s.lower_bound - abs(self.eps) * float(np.linalg.norm(phi.vector))
            if bound <= 0:
                raise ValueError("eps too large: w + eps*phi may vanish")
            self.singularity = SingularityDescriptor("discontinuity", s.location, bound)
        else:
            self.singularity = s

    def value(self, x):
        x = _pts(x)
        return self.w.value(x) + self.eps * self.phi.value(x)

    def gradient(self, x):
        x = _pts(x)
        return self.w.gradient(x) + self.eps * self.phi.gradient(x)


def outer_variation(w, phi, eps):
    return OuterVariation(w, phi, eps)
