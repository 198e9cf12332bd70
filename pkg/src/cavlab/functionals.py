"""The G field, the functionals I and K, and their variations.

``G(w) = adj(grad w) w / |w|^3`` is divergence-free away from the zeros and
discontinuities of ``w``.  ``I(w) = int |G|^q`` and ``K(w) = int zeta . G``
with ``zeta(x) = x / |x|^(2q-1)``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import maps as M
from . import tensor3 as t3
from .quadrature import QuadResult, integrate_ball, integrate_shell, integrate_sphere, resolve

FD_LADDER = (1e-3, 5e-4, 2.5e-4)


@dataclass(frozen=True)
class ExponentConfig:
    q: float = 1.25

    def __post_init__(self):
        if not 1.0 < self.q < 1.5:
            raise ValueError("q must satisfy 1 < q < 3/2 (got %r)" % self.q)

    @property
    def two_q(self):
        return 2.0 * self.q

    @property
    def theta(self):
        """``3 - 2q``: the decay exponent of ``|x|^(-2q)`` integrated over small balls."""
        return 3.0 - 2.0 * self.q

    def zeta(self, x):
        x = np.asarray(x, dtype=float)
        R = t3.norm(x)
        return x / R[..., None] ** (2.0 * self.q - 1.0)

    def zeta_gradient(self, x):
        x = np.asarray(x, dtype=float)
        R = t3.norm(x)
        xb = x / R[..., None]
        return (R ** (1.0 - 2.0 * self.q))[..., None, None] * (t3.IDENTITY - (2.0 * self.q - 1.0) * t3.outer(xb, xb))

    @property
    def identity_value(self):
        """``I(i) = K(i) = 4 pi / (3 - 2q)``."""
        return 4.0 * math.pi / self.theta

    def k_degree_one(self, x0):
        """``K`` of any degree-one map whose only zero or discontinuity sits at ``x0``."""
        r = float(np.linalg.norm(x0))
        return 4.0 * math.pi / self.theta * (1.0 - r**self.theta)


DEFAULT = ExponentConfig()


def _cfg(cfg):
    if cfg is None:
        return DEFAULT
    if isinstance(cfg, (int, float)):
        return ExponentConfig(float(cfg))
    return cfg


def _spec(spec, cfg, w=None, extra=(), variation=False):
    spec = resolve(spec)
    radii = tuple(w.interfaces) if w is not None else ()
    exps, ladder = spec.extra_exponents, spec.eps_ladder

    def add(p):
        nonlocal exps, ladder
        if all(abs(p - e) > 1e-12 for e in exps):
            exps = (p,) + tuple(exps)
            ladder = tuple(ladder) + (0.5 * ladder[-1],)

    if w is not None and w.singularity.kind == "discontinuity":
        if np.linalg.norm(w.singularity.point) > 0:
            # |grad w| ~ 1/r about an off-centre jump leaves an O(eps) remainder with no angular cancellation
            add(1.0)
        elif variation:
            # grad w ~ 1/r against the Taylor terms of phi: odd orders cancel on spheres,
            # leaving eps^(theta+1) and eps^(theta+3)
            add(cfg.theta + 3.0)
            add(cfg.theta + 1.0)
    return dataclasses.replace(
        spec,
        theta_hint=cfg.theta,
        extra_exponents=exps,
        eps_ladder=ladder,
        interfaces=tuple(sorted(set(spec.interfaces + radii + tuple(extra)))),
        local_interfaces=tuple(sorted(set(spec.local_interfaces + (tuple(w.local_interfaces) if w is not None else ())))),
    )


# ---------------------------------------------------------------- pointwise


def _G(w, x):
    v = w.value(x)
    n = t3.norm(v)
    return t3.matvec(t3.adjugate(w.gradient(x)), v / n[:, None] ** 3)


def G_field(w, x):
    """``adj(grad w) w / |w|^3`` at the points ``x``."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = x.reshape(-1, 3)
    if w.singularity.kind != "none":
        d = t3.norm(x - w.singularity.point)
        if np.any(d < 1e-14):
            raise ValueError("G is undefined at the singular point %s" % (w.singularity.location,))
    v = w.value(x)
    if np.any(t3.norm(v) < 1e-12):
        bad = x[np.argmin(t3.norm(v))]
        raise ValueError("G is undefined where w vanishes (x=%s)" % bad.tolist())
    g = _G(w, x)
    return g[0] if single else g


def _central_div(w, x, h):
    out = np.zeros(x.shape[0])
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        out += (_G(w, x + e)[:, i] - _G(w, x - e)[:, i]) / (2.0 * h)
    return out


def div_G(w, x, h=1e-4):
    """Centered-difference divergence of ``G(w)``.

    Steps ``h`` and ``h/2`` are combined to cancel the ``h^2`` term.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = x.reshape(-1, 3)
    out = (4.0 * _central_div(w, x, 0.5 * h) - _central_div(w, x, h)) / 3.0
    return out[0] if single else out


# ---------------------------------------------------------------- functionals


def I_functional(w, cfg=None, spec=None, strict=False):
    """``int_B |G(w)|^q``."""
    cfg = _cfg(cfg)
    s = _spec(spec, cfg, w)
    return integrate_ball(lambda x: t3.norm(_G(w, x)) ** cfg.q, s, w.singular_points, strict=strict)


def K_functional(w, cfg=None, spec=None, strict=False):
    """``int_B zeta . G(w)``."""
    cfg = _cfg(cfg)
    s = _spec(spec, cfg, w)
    return integrate_ball(
        lambda x: np.einsum("ni,ni->n", cfg.zeta(x), _G(w, x)), s, w.singular_points, strict=strict
    )


def _vanishes_near(phi, p):
    p = np.asarray(p, dtype=float)
    if not np.any(phi.vector) or np.linalg.norm(p - phi.center) > phi.radius:
        return True
    return bool(np.linalg.norm(p) == 0 and phi.dead_zone > 0)


def _require_discontinuity(w, what, phi=None):
    if w.singularity.kind == "zero" and not (phi is not None and _vanishes_near(phi, w.singularity.point)):
        raise ValueError(
            "%s is not defined for maps with a zero: the integrand is not integrable near the zero" % what
        )


def delta_K_formula(w, phi, cfg=None, spec=None, strict=False):
    """First variation of ``K`` at ``w`` in the direction ``phi`` (outer variations)."""
    _require_discontinuity(w, "delta_K_formula")
    cfg = _cfg(cfg)

    def integrand(x):
        v = w.value(x)
        n = t3.norm(v)
        vb = v / n[:, None]
        F = w.gradient(x)
        br = t3.bracket(F, phi.gradient(x))
        p = phi.value(x)
        term1 = t3.matvec(br, v / n[:, None] ** 3)
        term2 = t3.matvec(t3.adjugate(F) / n[:, None, None] ** 3, p - 3.0 * vb * np.einsum("ni,ni->n", vb, p)[:, None])
        return np.einsum("ni,ni->n", cfg.zeta(x), term1 + term2)

    return integrate_ball(integrand, _spec(spec, cfg, w, phi.breaks, True), w.singular_points, strict=strict)


@dataclass
class IBPTerms:
    lhs: QuadResult
    rhs: QuadResult

    @property
    def residual(self):
        return self.lhs.value - self.rhs.value

    @property
    def error(self):
        return self.lhs.error + self.rhs.error

    @property
    def converged(self):
        return self.lhs.converged and self.rhs.converged


def ibp_terms(w, phi, cfg=None, spec=None, ordering="v,Ftv"):
    """Both sides of the integration-by-parts identity for maps with a discontinuity.

    ``int zeta . <grad w, grad phi> w/|w|^3`` against
    ``int zeta/|w|^3 . (2 adj(grad w) - 3 <grad w, wbar (x) grad w^T wbar>) phi``.
    ``ordering="Ftv,v"`` swaps the factors of that tensor product; the
    identity then fails, which is how the ordering was pinned down.
    """
    if ordering not in ("v,Ftv", "Ftv,v"):
        raise ValueError("ordering must be 'v,Ftv' or 'Ftv,v'")
    _require_discontinuity(w, "ibp_residual", phi)
    cfg = _cfg(cfg)
    s = _spec(spec, cfg, w, phi.breaks, True)

    def lhs(x):
        v = w.value(x)
        n = t3.norm(v)
        br = t3.bracket(w.gradient(x), phi.gradient(x))
        return np.einsum("ni,ni->n", cfg.zeta(x), t3.matvec(br, v / n[:, None] ** 3))

    def rhs(x):
        v = w.value(x)
        n = t3.norm(v)
        vb = v / n[:, None]
        F = w.gradient(x)
        ftv = t3.matvec(t3.transpose(F), vb)
        M3 = t3.bracket(F, t3.outer(vb, ftv) if ordering == "v,Ftv" else t3.outer(ftv, vb))
        A = 2.0 * t3.adjugate(F) - 3.0 * M3
        return np.einsum("ni,ni->n", cfg.zeta(x) / n[:, None] ** 3, t3.matvec(A, phi.value(x)))

    pts = w.singular_points
    return IBPTerms(integrate_ball(lhs, s, pts), integrate_ball(rhs, s, pts))


def ibp_residual(w, phi, cfg=None, spec=None):
    return ibp_terms(w, phi, cfg, spec).residual


def boundary_flux_T1(w, phi, eps, cfg=None, spec=None):
    """Flux of the integration-by-parts boundary term through ``|x - x0| = eps``."""
    cfg = _cfg(cfg)
    x0 = w.singularity.point

    def integrand(x):
        v = w.value(x)
        n = t3.norm(v)
        nu = (x - x0) / eps
        # zeta_i eps^{sab} eps^{icd} w_{a,c} w_s phi_b nu_d / |w|^3
        val = np.einsum(
            "sab,icd,ni,nac,ns,nb,nd->n", t3.LEVI_CIVITA, t3.LEVI_CIVITA, cfg.zeta(x), w.gradient(x), v, phi.value(x), nu
        )
        return -val / n**3

    return integrate_sphere(integrand, x0, eps, spec)


# ---------------------------------------------------------------- inner variations


def _require_dead_zone(phi, x0):
    if not np.any(phi.vector):
        return
    r0 = float(np.linalg.norm(x0))
    if r0 == 0:
        raise ValueError("inner-variation formulas need the singularity away from the origin")
    clear = max(phi.dead_zone, float(np.linalg.norm(phi.center)) - phi.radius)
    if clear <= 0:
        raise ValueError("test field must vanish on a ball about the origin")


def innervar_derivative_volume(w, phi, cfg=None, spec=None, strict=False):
    """``d/d eps K(w(x + eps phi))`` at 0 from the two volume integrals."""
    cfg = _cfg(cfg)
    x0 = w.singularity.point
    _require_dead_zone(phi, x0)

    def integrand(x):
        g = _G(w, x)
        p = phi.value(x)
        a = t3.matvec(cfg.zeta_gradient(x), p)
        b = np.einsum("ni,nij,nj->n", cfg.zeta(x), phi.gradient(x), g)
        return -np.einsum("ni,ni->n", a, g) - b

    return integrate_ball(integrand, _spec(spec, cfg, w, phi.breaks), w.singular_points, strict=strict)


def sphere_factor(A, spec=None):
    """``det A int_{S^2} |A y|^-3 dH^2(y)``; equals 4 pi when ``det A > 0``."""
    A = np.asarray(A, dtype=float).reshape(3, 3)
    val = integrate_sphere(lambda y: t3.norm(y @ A.T) ** -3.0, np.zeros(3), 1.0, spec)
    return float(np.linalg.det(A)) * val


def innervar_derivative_flux(w, phi, cfg=None, spec=None):
    """Inner-variation derivative from the local data of ``w`` at its zero."""
    cfg = _cfg(cfg)
    if w.singularity.kind != "zero":
        raise ValueError("the flux formula needs a map with an isolated zero")
    x0 = w.singularity.point
    if np.linalg.norm(x0) == 0:
        raise ValueError("the flux formula needs the zero away from the origin, where zeta is singular")
    _require_dead_zone(phi, x0)
    A = w.gradient(x0.reshape(1, 3))[0]
    zp = float(cfg.zeta(x0) @ phi.pinned_value(x0))
    return zp * sphere_factor(A, spec)


# ---------------------------------------------------------------- finite differences


@dataclass
class VariationReport:
    analytic: float
    eps: list
    quotients: list
    extrapolated: float
    abs_discrepancy: float
    rel_discrepancy: float
    quad_errors: dict = field(default_factory=dict)

    @staticmethod
    def relative(a, b):
        return abs(a - b) / max(abs(a), abs(b), 1e-300)

    def agrees(self, rtol=1e-3, atol=1e-6):
        if abs(self.analytic) < atol and abs(self.extrapolated) < atol:
            return True
        return self.rel_discrepancy <= rtol


def richardson(eps, quotients):
    """Limit at ``eps = 0`` of quotients with an error polynomial in ``eps``."""
    eps = np.asarray(eps, dtype=float)
    A = np.vander(eps, len(eps), increasing=True)
    return float(np.linalg.solve(A, np.asarray(quotients, dtype=float))[0])


def fd_variation(analytic, family, base, eps=FD_LADDER):
    """Compare ``analytic`` with one-sided quotients ``(F(eps) - F(0)) / eps``.

    ``family(eps)`` and ``base`` are quadrature results (or floats).
    """
    b = float(base.value if isinstance(base, QuadResult) else base)
    errs = {"base": getattr(base, "error", 0.0)}
    quots = []
    for e in eps:
        r = family(e)
        errs[repr(e)] = getattr(r, "error", 0.0)
        quots.append((float(getattr(r, "value", r)) - b) / e)
    ext = richardson(eps, quots)
    a = float(analytic)
    return VariationReport(a, list(eps), quots, ext, abs(a - ext), VariationReport.relative(a, ext), errs)


def delta_K_report(w, phi, cfg=None, spec=None, eps=FD_LADDER):
    cfg = _cfg(cfg)
    an = delta_K_formula(w, phi, cfg, spec)
    # the base point is the eps = 0 member of the family so that all evaluations share panels
    rep = fd_variation(
        an.value,
        lambda e: K_functional(M.outer_variation(w, phi, e), cfg, spec),
        K_functional(M.outer_variation(w, phi, 0.0), cfg, spec),
        eps,
    )
    rep.quad_errors["analytic"] = an.error
    return rep


def innervar_fd(w, phi, cfg=None, spec=None, eps=FD_LADDER):
    """Finite-difference estimate of the inner-variation derivative of ``K``."""
    cfg = _cfg(cfg)
    base = K_functional(M.inner_variation(w, phi, 0.0), cfg, spec)
    quots = []
    for e in eps:
        quots.append((K_functional(M.inner_variation(w, phi, e), cfg, spec).value - base.value) / e)
    return richardson(eps, quots), quots


# ---------------------------------------------------------------- scans and checks


def zero_motion_scan(f, taus, cfg=None, spec=None, N=8):
    """Inner-variation derivative along the small-zero family with prescribed zero motion.

    For each ``tau`` the test field equals ``f(tau) e1`` near the zero
    ``tau e1`` and vanishes near the origin.  Rows report the flux value and
    the leading-order prediction ``4 pi tau^(2-2q) f(tau)``.
    """
    cfg = _cfg(cfg)
    rows = []
    for tau in taus:
        ft = float(f(tau))
        if ft <= 0:
            raise ValueError("f must be positive on the ladder (f(%g) = %g)" % (tau, ft))
        g = M.small_zero_map(tau, N)
        x0 = g.singularity.point
        mu = M.bump_field(x0, 0.5 * tau, (ft, 0.0, 0.0))
        val = innervar_derivative_flux(g, mu, cfg, spec)
        pred = 4.0 * math.pi * tau ** (2.0 - 2.0 * cfg.q) * ft
        rows.append({"tau": tau, "f": ft, "dK": val, "prediction": pred, "ratio": val / pred})
    return rows


def lower_bound_gap(w, cfg=None, spec=None):
    """``I(w) - I(i) - q (K(w) - K(i))`` with ``I(i) = K(i)`` in closed form."""
    cfg = _cfg(cfg)
    ii = cfg.identity_value
    return I_functional(w, cfg, spec).value - ii - cfg.q * (K_functional(w, cfg, spec).value - ii)


def convexity_gap(w, cfg=None, spec=None):
    """Minimum over the quadrature nodes of ``f(G) - f(G_i) - Df(G_i).(G - G_i)``, ``f = |.|^q``.

    Returned relative to ``f(G_i)`` so that it is scale free near the origin.
    """
    cfg = _cfg(cfg)
    worst = [np.inf]

    def integrand(x):
        g = _G(w, x)
        gi = x / t3.norm(x)[:, None] ** 3
        fi = t3.norm(gi) ** cfg.q
        gap = t3.norm(g) ** cfg.q - fi - cfg.q * np.einsum("ni,ni->n", cfg.zeta(x), g - gi)
        worst[0] = min(worst[0], float(np.min(gap / fi)))
        return t3.norm(g) ** cfg.q

    integrate_ball(integrand, _spec(spec, cfg, w), w.singular_points)
    return worst[0]


def shell_gradient_mass(w, r_in, r_out, spec=None, center=(0.0, 0.0, 0.0), breaks=()):
    """``int |grad w|`` over an annulus about ``center``."""
    return integrate_shell(lambda x: t3.norm(w.gradient(x).reshape(-1, 9)), r_in, r_out, spec, center, breaks)


def gradient_distance(w1, w2, p, r_in, spec=None, center=(0.0, 0.0, 0.0), breaks=()):
    """``||grad w1 - grad w2||_p`` over ``r_in < |x - center| < 1`` (center at the origin)."""
    d = integrate_shell(
        lambda x: t3.norm((w1.gradient(x) - w2.gradient(x)).reshape(-1, 9)) ** p, r_in, 1.0, spec, center, breaks
    )
    return d ** (1.0 / p)
