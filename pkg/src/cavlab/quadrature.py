"""Deterministic integration over the unit ball, spheres and shells.

Integrands are vectorized callables ``f(points) -> values`` with ``points`` of
shape ``(n, 3)``.  Ball integrals are split by a smooth partition of unity
into local patches around each singular point (polar coordinates centred on
the point) plus a background patch in polar coordinates about the origin.
Radial directions use Gauss-Legendre panels on geometric shells; the angular
rule is Gauss-Legendre in cos(theta) times the periodic trapezoid rule in
azimuth.

Near each singular point a ball of radius ``eps_k * s_p`` is removed, where
``s_p`` is the radius of that point's patch (1 for the origin when it is the
only singular point).  The truncated integrals for the whole ladder are
extrapolated to zero radius.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache

import numpy as np

_ORIGIN_TOL = 1e-14


class NonConvergenceError(RuntimeError):
    """Raised when the exclusion ladder does not settle."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


@dataclass(frozen=True)
class QuadratureSpec:
    n_r: int = 12
    n_theta: int = 24
    n_phi: int = 48
    eps_ladder: tuple = (0.02, 0.01, 0.005, 0.0025)
    theta_hint: float = 0.5
    extra_exponents: tuple = (2.0, 3.0)
    log_correction: bool = False
    interfaces: tuple = ()
    local_interfaces: tuple = ()
    rtol: float = 1e-8
    atol: float = 1e-12
    workers: int = 1

    def __post_init__(self):
        ladder = tuple(float(e) for e in self.eps_ladder)
        if len(ladder) < 2:
            raise ValueError("eps_ladder needs at least two rungs")
        if any(e <= 0 for e in ladder) or any(b >= a for a, b in zip(ladder, ladder[1:])):
            raise ValueError("eps_ladder must be positive and strictly decreasing: %r" % (ladder,))
        if ladder[0] >= 1:
            raise ValueError("eps_ladder entries must be < 1")
        object.__setattr__(self, "eps_ladder", ladder)
        object.__setattr__(self, "interfaces", tuple(sorted(float(r) for r in self.interfaces)))
        object.__setattr__(self, "local_interfaces", tuple(sorted(float(r) for r in self.local_interfaces)))
        object.__setattr__(self, "extra_exponents", tuple(float(e) for e in self.extra_exponents))
        if min(self.n_r, self.n_theta, self.n_phi) < 1:
            raise ValueError("rule orders must be positive")

    def with_interfaces(self, *radii):
        merged = set(self.interfaces)
        merged.update(float(r) for r in radii if 0 < r < 1)
        return replace(self, interfaces=tuple(sorted(merged)))

    def refined(self, factor=2):
        return replace(self, n_r=self.n_r * factor, n_theta=self.n_theta * factor, n_phi=self.n_phi * factor)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        preset = data.pop("preset", None)
        base = asdict(PRESETS[preset]) if preset else {}
        base.update(data)
        return cls(**base)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


PRESETS = {
    "fast": QuadratureSpec(n_r=8, n_theta=16, n_phi=32),
    "default": QuadratureSpec(),
    "paranoid": QuadratureSpec(n_r=20, n_theta=40, n_phi=80, eps_ladder=(0.02, 0.01, 0.005, 0.0025, 0.00125)),
}


def preset(name):
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError("unknown quadrature preset %r (choose from %s)" % (name, sorted(PRESETS))) from None


def resolve(spec):
    """Accept a spec, a preset name, or None (the default preset)."""
    if spec is None:
        return PRESETS["default"]
    if isinstance(spec, str):
        return preset(spec)
    return spec


@dataclass
class QuadResult:
    value: float
    error: float
    rungs: list = field(default_factory=list)
    extrapolants: list = field(default_factory=list)
    converged: bool = True

    def __float__(self):
        return self.value


@lru_cache(maxsize=None)
def gauss_legendre(n):
    x, w = np.polynomial.legendre.leggauss(n)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def _gl_on(a, b, n):
    x, w = gauss_legendre(n)
    half = 0.5 * (b - a)
    return a + half * (x + 1.0), half * w


def smooth_step(t):
    """C-infinity step: 0 for t <= 0, 1 for t >= 1."""
    t = np.clip(np.asarray(t, dtype=float), 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(t > 0, np.exp(-1.0 / np.where(t > 0, t, 1.0)), 0.0)
        b = np.where(t < 1, np.exp(-1.0 / np.where(t < 1, 1.0 - t, 1.0)), 0.0)
    return a / (a + b)


def cutoff(s):
    """1 on [0, 1/2], 0 on [1, inf), smooth in between."""
    return 1.0 - smooth_step(2.0 * np.asarray(s) - 1.0)


def _frame(axis):
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    helper = np.array([1.0, 0.0, 0.0]) if abs(a[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    t1 = np.cross(a, helper)
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(a, t1)
    return t1, t2, a


def sphere_rule(n_theta, n_phi, axis=(0.0, 0.0, 1.0), u_breaks=()):
    """Unit-sphere nodes and weights (product rule, optional polar-angle panels)."""
    t1, t2, a = _frame(axis)
    edges = [-1.0] + sorted(u for u in u_breaks if -1 < u < 1) + [1.0]
    us, wu = [], []
    for lo, hi in zip(edges, edges[1:]):
        x, w = _gl_on(lo, hi, n_theta)
        us.append(x)
        wu.append(w)
    u = np.concatenate(us)
    wu = np.concatenate(wu)
    phi = 2.0 * np.pi * (np.arange(n_phi) + 0.5) / n_phi
    s = np.sqrt(np.clip(1.0 - u * u, 0.0, None))
    dirs = (
        (s[:, None] * np.cos(phi)[None, :])[..., None] * t1
        + (s[:, None] * np.sin(phi)[None, :])[..., None] * t2
        + u[:, None, None] * a
    )
    weights = wu[:, None] * np.full(n_phi, 2.0 * np.pi / n_phi)[None, :]
    return dirs.reshape(-1, 3), weights.reshape(-1)


def _pairwise_sum(values):
    values = list(values)
    if not values:
        return 0.0
    while len(values) > 1:
        paired = [values[i] + values[i + 1] for i in range(0, len(values) - 1, 2)]
        if len(values) % 2:
            paired.append(values[-1])
        values = paired
    return values[0]


def _radial_breaks(inner, outer, ladder_radii, interfaces):
    """Sorted breakpoints: ladder radii, geometric doubling, interfaces."""
    pts = set(r for r in ladder_radii if inner <= r <= outer)
    start = max(ladder_radii) if ladder_radii else inner
    r = start
    while r < outer:
        pts.add(r)
        r *= 2.0
    pts.update(r for r in interfaces if inner < r < outer)
    pts.add(inner)
    pts.add(outer)
    pts = sorted(pts)
    out = [pts[0]]
    for p in pts[1:]:
        if p - out[-1] > 1e-13 * max(1.0, p):
            out.append(p)
    return out


@dataclass
class _Patch:
    center: np.ndarray
    radius: float
    ladder: tuple        # absolute exclusion radii, decreasing; () if not singular here
    axis: np.ndarray
    u_breaks: tuple
    interfaces: tuple
    weight: object       # callable(points) -> partition weight


def _make_patches(spec, singular_points):
    pts = []
    for p in singular_points:
        p = np.asarray(p, dtype=float).reshape(3)
        if np.linalg.norm(p) >= 1:
            raise ValueError("singular point %s lies outside the unit ball" % p)
        if not any(np.linalg.norm(p - q) < 1e-12 for q in pts):
            pts.append(p)
    origin_singular = any(np.linalg.norm(p) < _ORIGIN_TOL for p in pts)
    others = [p for p in pts if np.linalg.norm(p) >= _ORIGIN_TOL]

    radii = []
    for p in others:
        dists = [np.linalg.norm(p)] + [np.linalg.norm(p - q) for q in others if q is not p]
        radii.append(min(0.45 * min(dists), 0.9 * (1.0 - np.linalg.norm(p))))
    scale0 = min([1.0] + radii)

    local = []
    for p, r in zip(others, radii):
        local.append(
            _Patch(
                center=p,
                radius=r,
                ladder=tuple(e * r for e in spec.eps_ladder),
                axis=np.array([0.0, 0.0, 1.0]),
                u_breaks=(),
                interfaces=(0.5 * r,) + tuple(a for a in spec.local_interfaces if a < r),
                weight=(lambda x, p=p, r=r: cutoff(np.linalg.norm(x - p, axis=-1) / r)),
            )
        )

    def background_weight(x):
        w = np.ones(x.shape[0])
        for patch in local:
            w -= patch.weight(x)
        return w

    axis = np.array([0.0, 0.0, 1.0])
    u_breaks = ()
    bg_interfaces = list(spec.interfaces)
    if others:
        axis = others[0] / np.linalg.norm(others[0])
        d, r = np.linalg.norm(others[0]), radii[0]
        u_breaks = (math.cos(math.asin(min(1.0, r / d))),)
        for patch in local:
            dc = np.linalg.norm(patch.center)
            bg_interfaces += [dc - patch.radius, dc - 0.5 * patch.radius, dc + 0.5 * patch.radius, dc + patch.radius]
    background = _Patch(
        center=np.zeros(3),
        radius=1.0,
        ladder=tuple(e * scale0 for e in spec.eps_ladder) if origin_singular else (),
        axis=axis,
        u_breaks=u_breaks,
        interfaces=tuple(bg_interfaces),
        weight=background_weight if local else None,
    )
    return [background] + local


def _patch_panels(patch, spec):
    if patch.ladder:
        breaks = _radial_breaks(patch.ladder[-1], patch.radius, patch.ladder, patch.interfaces)
    else:
        first = min([patch.radius * spec.eps_ladder[0]] + [r for r in patch.interfaces if r > 0])
        breaks = [0.0] + _radial_breaks(first, patch.radius, (), patch.interfaces)
    return list(zip(breaks, breaks[1:]))


def _integrate_panel(f, patch, lo, hi, dirs, wdir, n_r):
    r, wr = _gl_on(lo, hi, n_r)
    pts = patch.center + (r[:, None, None] * dirs[None, :, :]).reshape(-1, 3)
    w = ((wr * r * r)[:, None] * wdir[None, :]).reshape(-1)
    vals = np.asarray(f(pts), dtype=float).reshape(-1)
    if patch.weight is not None:
        vals = vals * patch.weight(pts)
    return math.fsum(vals * w)


def _ladder_values(f, spec, singular_points):
    """Truncated integrals, one per ladder rung."""
    patches = _make_patches(spec, singular_points)
    jobs = []
    for pi, patch in enumerate(patches):
        dirs, wdir = sphere_rule(spec.n_theta, spec.n_phi, patch.axis, patch.u_breaks)
        for lo, hi in _patch_panels(patch, spec):
            jobs.append((pi, lo, hi, dirs, wdir))

    def run(job):
        pi, lo, hi, dirs, wdir = job
        return _integrate_panel(f, patches[pi], lo, hi, dirs, wdir, spec.n_r)

    if spec.workers > 1:
        with ThreadPoolExecutor(max_workers=spec.workers) as pool:
            sums = list(pool.map(run, jobs))
    else:
        sums = [run(job) for job in jobs]

    n = len(spec.eps_ladder)
    rungs = []
    for k in range(n):
        kept = []
        for (pi, lo, hi, _, _), s in zip(jobs, sums):
            ladder = patches[pi].ladder
            if not ladder or lo >= ladder[k] * (1 - 1e-12):
                kept.append(s)
        rungs.append(_pairwise_sum(kept))
    return rungs


def _basis(spec):
    theta = spec.theta_hint
    funcs = [lambda e: e ** theta]
    if spec.log_correction:
        funcs.append(lambda e: e ** theta * math.log(e))
    for p in spec.extra_exponents:
        if all(abs(p - q) > 1e-12 for q in [theta]):
            funcs.append(lambda e, p=p: e ** p)
    return funcs


def _window_limit(eps, vals, funcs):
    m = len(funcs)
    A = np.array([[1.0] + [g(e) for g in funcs] for e in eps])
    if m == 0:
        return vals[-1]
    return float(np.linalg.solve(A, np.asarray(vals))[0])


def extrapolate(eps, values, funcs):
    """Sliding-window extrapolation to zero exclusion radius.

    Each window of ``len(funcs) + 1`` consecutive rungs is fitted exactly by
    ``c0 + sum_j c_j g_j(eps)``.  Returns (value, error estimate, extrapolants).
    """
    n = len(values)
    m = min(len(funcs), n - 1)
    ext = [_window_limit(eps[i:i + m + 1], values[i:i + m + 1], funcs[:m]) for i in range(n - m)]
    if len(ext) >= 2:
        return ext[-1], abs(ext[-1] - ext[-2]), ext
    # single window: compare against the last window one order lower
    lower = _window_limit(eps[n - m:], values[n - m:], funcs[:m - 1])
    return ext[-1], abs(ext[-1] - lower), [lower] + ext


def _finish(rungs, eps, spec, tol, strict, label):
    value, err, ext = extrapolate(list(eps), rungs, _basis(spec))
    bound = tol if tol is not None else max(spec.atol, spec.rtol * abs(value))
    converged = bool(err <= 100.0 * bound)
    res = QuadResult(value=value, error=err, rungs=list(rungs), extrapolants=ext, converged=converged)
    if strict and not converged:
        raise NonConvergenceError(
            "%s: exclusion ladder did not converge (error %.3e, tolerance %.3e)" % (label, err, bound), res
        )
    return res


def integrate_ball(f, spec=None, singular_points=((0.0, 0.0, 0.0),), tol=None, strict=False):
    """Integral of ``f`` over the unit ball.

    ``singular_points`` are removed with the shrinking ladder and the result
    is extrapolated.  ``converged`` is False when successive extrapolants
    differ by more than 100x the tolerance (``tol`` absolute, or the quadrature spec's
    ``rtol``/``atol``); with ``strict=True`` that raises
    :class:`NonConvergenceError` instead.
    """
    spec = resolve(spec)
    rungs = _ladder_values(f, spec, singular_points)
    return _finish(rungs, spec.eps_ladder, spec, tol, strict, "integrate_ball")


def integrate_sphere(f, center, radius, spec=None, axis=(0.0, 0.0, 1.0)):
    """Surface integral of ``f`` over the sphere ``|y - center| = radius``."""
    spec = resolve(spec)
    center = np.asarray(center, dtype=float).reshape(3)
    if radius <= 0:
        raise ValueError("sphere radius must be positive")
    if np.linalg.norm(center) + radius > 1.0 + 1e-12:
        raise ValueError("sphere B(%s, %g) is not contained in the unit ball" % (center.tolist(), radius))
    dirs, w = sphere_rule(spec.n_theta, spec.n_phi, axis)
    vals = np.asarray(f(center + radius * dirs), dtype=float).reshape(-1)
    return radius * radius * math.fsum(vals * w)


def integrate_shell(f, r_in, r_out, spec=None, center=(0.0, 0.0, 0.0), breaks=(), axis=(0.0, 0.0, 1.0), u_breaks=()):
    """Integral over the annulus ``r_in < |x - center| < r_out`` (no extrapolation).

    ``breaks`` are extra radial panel edges; ``u_breaks`` are polar-angle
    cosines (about ``axis``) where the integrand has kinks.
    """
    spec = resolve(spec)
    if not 0 <= r_in < r_out:
        raise ValueError("need 0 <= r_in < r_out")
    center = np.asarray(center, dtype=float).reshape(3)
    dirs, wdir = sphere_rule(spec.n_theta, spec.n_phi, axis, u_breaks)
    lo0 = r_in if r_in > 0 else min(r_out * spec.eps_ladder[-1], r_out / 2)
    edges = _radial_breaks(lo0, r_out, (), tuple(breaks) + spec.interfaces)
    if r_in == 0:
        edges = [0.0] + edges
    patch = _Patch(center, r_out, (), None, (), (), None)
    sums = [_integrate_panel(f, patch, lo, hi, dirs, wdir, spec.n_r) for lo, hi in zip(edges, edges[1:])]
    return _pairwise_sum(sums)


def shell_ladder(f, radii, spec=None, center=(0.0, 0.0, 0.0), outer=1.0):
    """Integrals over ``radius < |x - center| < outer`` for each radius."""
    return [integrate_shell(f, r, outer, spec, center) for r in radii]


@dataclass
class RateFit:
    slope: float
    intercept: float
    residuals: list
    max_residual: float


def fit_rate(xs, values):
    """Least-squares slope of ``log(values)`` against ``log(xs)``."""
    xs = np.asarray(xs, dtype=float)
    values = np.asarray(values, dtype=float)
    if xs.size < 3 or xs.size != values.size:
        raise ValueError("fit_rate needs at least three (x, value) pairs")
    if np.any(values <= 0) or np.any(xs <= 0):
        raise ValueError("fit_rate needs positive abscissae and values")
    lx, ly = np.log(xs), np.log(values)
    slope, intercept = np.polyfit(lx, ly, 1)
    res = ly - (slope * lx + intercept)
    return RateFit(float(slope), float(intercept), res.tolist(), float(np.max(np.abs(res))))
