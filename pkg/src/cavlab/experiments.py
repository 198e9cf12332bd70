"""Scenario runner, reports and the ``cavlab`` command line.

Config files are JSON objects with ``"schema": 1``; every other key is
optional::

    {"schema": 1, "scenario": "path-scan", "q": 1.25, "quad": "default",
     "map": {"family": "hold", "parameters": {"rho": 0.5, "f": {"family": "twist_shift"}}},
     "ladders": {"t": [0, 0.2, 0.4, 0.6, 0.8, 1.0]}, "tau": 0.3}

``quad`` is a preset name or an inline quadrature spec (``{"preset": ...,
"n_r": ...}``).  Map specs are ``{"family": name, "parameters": {...}}``; see
:func:`build_map` for the families.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import functionals as F
from . import maps as M
from . import tensor3 as t3
from .quadrature import QuadratureSpec, fit_rate, integrate_ball, integrate_shell, preset, resolve

SCHEMA = 1
CSV_COLUMNS = ("scenario", "check", "value", "reference", "tolerance", "status")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- config


@dataclass
class ScenarioConfig:
    scenario: str
    q: float = 1.25
    quad: object = "default"
    map: dict | None = None
    ladders: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    out: str | None = None
    format: str = "json"

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError("unknown scenario %r (see `cavlab list`)" % self.scenario)
        if self.format not in ("json", "csv"):
            raise ConfigError("format must be json or csv")
        try:
            self.exponents = F.ExponentConfig(float(self.q))
            self.quad_spec = _quad_spec(self.quad)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_dict(cls, data, **overrides):
        data = dict(data)
        schema = data.pop("schema", SCHEMA)
        if schema != SCHEMA:
            raise ConfigError("unsupported config schema %r (expected %d)" % (schema, SCHEMA))
        known = {"scenario", "q", "quad", "map", "ladders", "out", "format"}
        params = {k: data.pop(k) for k in list(data) if k not in known}
        data.update({k: v for k, v in overrides.items() if v is not None})
        if "scenario" not in data:
            raise ConfigError("config needs a scenario name")
        return cls(params=params, **data)

    def echo(self):
        return {
            "schema": SCHEMA,
            "scenario": self.scenario,
            "q": self.exponents.q,
            "quad": asdict(self.quad_spec),
            "map": self.map,
            "ladders": self.ladders,
            "params": self.params,
        }

    def ladder(self, name, default):
        vals = self.ladders.get(name, default)
        if not isinstance(vals, (list, tuple)) or not vals:
            raise ConfigError("ladder %r must be a non-empty list" % name)
        return [float(v) for v in vals]


def _quad_spec(q):
    if isinstance(q, QuadratureSpec):
        return q
    if isinstance(q, str):
        return preset(q)
    if isinstance(q, dict):
        return QuadratureSpec.from_dict(q)
    raise ConfigError("quad must be a preset name or an object")


# ---------------------------------------------------------------- map specs


def build_map(spec):
    """Build a map from ``{"family": name, "parameters": {...}}``.

    Families: identity, radial (profile cavity|power|linear with lam/k),
    twist_shift (kappa, mu), hold (f, rho), circle (base, tau),
    gamma (base, tau, t), small_zero (tau, N), blend (base, j, l).
    """
    if not isinstance(spec, dict) or "family" not in spec:
        raise ConfigError("map spec must be an object with a 'family' key")
    fam = spec["family"]
    p = dict(spec.get("parameters", {}))
    try:
        if fam == "identity":
            return M.identity_map()
        if fam == "radial":
            prof = p.get("profile", "cavity")
            if prof == "cavity":
                return M.cavity_map(float(p.get("lam", 0.4)))
            if prof == "power":
                return M.radial_map(M.power_profile(float(p.get("k", 2.0))))
            if prof == "linear":
                return M.identity_map()
            raise ConfigError("unknown radial profile %r" % prof)
        if fam == "twist_shift":
            return M.TwistShift(float(p.get("kappa", 1.0)), float(p.get("mu", 0.2)))
        if fam == "hold":
            f = build_map(p["f"]) if "f" in p else None
            return M.hold_map(f, float(p.get("rho", 0.5)))
        if fam == "circle":
            return M.circle_map(build_map(p["base"]), float(p["tau"]))
        if fam == "gamma":
            return M.PathGamma(build_map(p["base"]), float(p["tau"]), float(p["t"]))
        if fam == "small_zero":
            return M.small_zero_map(float(p.get("tau", 0.1)), int(p.get("N", 8)))
        if fam == "blend":
            return M.mollified_blend(build_map(p["base"]), int(p["j"]), p.get("l"))
    except KeyError as exc:
        raise ConfigError("map family %r is missing parameter %s" % (fam, exc)) from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError("bad parameters for map family %r: %s" % (fam, exc)) from exc
    raise ConfigError("unknown map family %r" % fam)


def build_field(spec):
    try:
        return M.bump_field(spec["center"], spec["radius"], spec["vector"], spec.get("dead_zone", 0.0))
    except KeyError as exc:
        raise ConfigError("test field is missing %s" % exc) from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError("bad test field: %s" % exc) from exc


# ---------------------------------------------------------------- reports


@dataclass
class Check:
    name: str
    value: float
    reference: float
    tolerance: float
    passed: bool
    detail: str = ""

    @property
    def status(self):
        return "pass" if self.passed else "fail"


def _num(x):
    x = float(x)
    return x if math.isfinite(x) else repr(x)


@dataclass
class RunReport:
    scenario: str
    inputs: dict
    checks: list = field(default_factory=list)
    quad_errors: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    nonconverged: list = field(default_factory=list)
    version: str = __version__

    @property
    def passed(self):
        return all(c.passed for c in self.checks) and not self.nonconverged

    def track(self, name, result):
        """Keep the error estimate of a quadrature whose convergence is required."""
        self.quad_errors[name] = result.error
        if not result.converged:
            self.nonconverged.append(name)

    def add(self, name, value, reference, tolerance, passed, detail=""):
        self.checks.append(Check(name, float(value), float(reference), float(tolerance), bool(passed), detail))

    def close(self, name, value, reference, rtol=None, atol=None, detail=""):
        """Record ``|value - reference| <= atol`` or ``<= rtol |reference|``."""
        err = abs(value - reference)
        tol = atol if atol is not None else rtol * abs(reference)
        self.add(name, value, reference, tol, err <= tol, detail)

    def to_dict(self):
        return {
            "scenario": self.scenario,
            "version": self.version,
            "passed": self.passed,
            "inputs": self.inputs,
            "checks": [
                {
                    "name": c.name,
                    "value": _num(c.value),
                    "reference": _num(c.reference),
                    "tolerance": _num(c.tolerance),
                    "status": c.status,
                    "detail": c.detail,
                }
                for c in self.checks
            ],
            "quad_errors": {k: _num(v) for k, v in self.quad_errors.items()},
            "nonconverged": list(self.nonconverged),
            "summary": self.summary,
            "timings": self.timings,
        }


def report_json(report):
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


def report_csv(report):
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(CSV_COLUMNS)
    for c in report.checks:
        wr.writerow([report.scenario, c.name, repr(c.value), repr(c.reference), repr(c.tolerance), c.status])
    return buf.getvalue()


def emit_report(report, path, fmt="json"):
    text = report_json(report) if fmt == "json" else report_csv(report)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise OSError("could not write report to %s: %s" % (path, exc)) from exc
    return path


# ---------------------------------------------------------------- scenarios


def _identity_suite(cfg, rep):
    n = int(cfg.params.get("instances", 10_000))
    res = t3.identity_residuals(np.random.default_rng(int(cfg.params.get("seed", 0))), n)
    for name, val in res.items():
        rep.add(name, val, 0.0, 1e-10, val < 1e-10, "max-abs residual over %d random instances" % n)


def _radial_suite(cfg, rep):
    c, s = cfg.exponents, cfg.quad_spec
    ref = c.identity_value
    ident = M.identity_map()
    for name, fn in (("I(identity)", F.I_functional), ("K(identity)", F.K_functional)):
        r = fn(ident, c, s)
        rep.track(name, r)
        rep.close(name, r.value, ref, rtol=1e-5)
    maps = [("I(cavity lam=%g)" % lam, M.cavity_map(lam)) for lam in cfg.ladder("lam", [0.2, 0.4, 0.6])]
    maps.append(("I(r=R^2)", M.radial_map(M.power_profile(2))))
    for name, w in maps:
        r = F.I_functional(w, c, s)
        rep.track(name, r)
        rep.close(name, r.value, ref, rtol=1e-4)


def _offinterface_points(w, tau, n, rng, gap=0.02):
    pts = []
    while sum(len(p) for p in pts) < n:
        x = M._ball_sample(rng, 4 * n)
        x = x[t3.norm(x - w.singularity.point) > gap]
        x = x[t3.norm(x) > gap]
        x = x[np.abs(t3.norm(w.value(x)) - tau) > gap]
        pts.append(x)
    return np.concatenate(pts)[:n]


def _circle_suite(cfg, rep):
    c, s = cfg.exponents, cfg.quad_spec
    rng = np.random.default_rng(int(cfg.params.get("seed", 0)))
    cases = [("identity", M.identity_map(), 0.3), ("small_zero(0.1)", M.small_zero_map(0.1), 0.05)]
    for name, w, tau in cases:
        wc = M.circle_map(w, tau)
        x = _offinterface_points(w, tau, 200, rng)
        g0, g1 = F.G_field(w, x), F.G_field(wc, x)
        dev = float(np.max(t3.norm(g1 - g0) / t3.norm(g0)))
        rep.add("G pointwise %s" % name, dev, 0.0, 1e-8, dev < 1e-8, "max relative deviation at 200 points")
        k0, k1 = F.K_functional(w, c, s), F.K_functional(wc, c, s)
        rep.track("K %s" % name, k0)
        rep.track("K circle %s" % name, k1)
        rep.close("K circle %s" % name, k1.value, k0.value, rtol=1e-4)


def default_fields():
    return [
        M.bump_field((0.2, 0.1, 0.0), 0.5, (0.3, -0.2, 0.5)),
        M.bump_field((-0.1, 0.3, 0.2), 0.4, (0.0, 0.4, -0.1)),
    ]


def _fields(cfg):
    if "fields" in cfg.params:
        return [build_field(f) for f in cfg.params["fields"]]
    return default_fields()


def _stationarity_suite(cfg, rep):
    c, s = cfg.exponents, cfg.quad_spec
    w = build_map(cfg.map) if cfg.map else M.cavity_map(0.4)
    k = F.K_functional(w, c, s)
    rep.track("K", k)
    for i, phi in enumerate(_fields(cfg), 1):
        r = F.delta_K_report(w, phi, c, s)
        tol = 5e-4 * abs(k.value)
        rep.add("deltaK phi%d" % i, r.analytic, 0.0, tol, abs(r.analytic) < tol)
        rep.add(
            "deltaK vs FD phi%d" % i, r.analytic, r.extrapolated, 1e-3, r.agrees(1e-3, 1e-6),
            "relative discrepancy %.3e" % r.rel_discrepancy,
        )
        res = F.ibp_terms(w, phi, c, s)
        rep.track("ibp phi%d" % i, res)
        rep.add("ibp residual phi%d" % i, res.residual, 0.0, 1e-3, abs(res.residual) < 1e-3)


def _path_scan(cfg, rep):
    c, s = cfg.exponents, cfg.quad_spec
    w = build_map(cfg.map) if cfg.map else M.hold_map(M.TwistShift(), float(cfg.params.get("rho", 0.5)))
    tau = float(cfg.params.get("tau", 0.3))
    ts = cfg.ladder("t", [0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
    ref = c.identity_value
    vals = []
    for t in ts:
        r = F.K_functional(M.PathGamma(w, tau, t), c, s)
        vals.append(r.value)
        rep.track("K t=%g" % t, r)
        # half the spread budget per point keeps max - min within 1e-3
        rep.close("K(gamma) t=%g" % t, r.value, ref, rtol=5e-4)
    rep.summary["relative_spread"] = (max(vals) - min(vals)) / abs(np.mean(vals))


def _triangle_fields(x0):
    return [
        M.bump_field((0, 0, 0), 0.5, (-1.0, 0.0, 0.0), dead_zone=0.02),
        M.bump_field((0, 0, 0), 0.6, (0.5, 0.8, -0.3), dead_zone=0.03),
    ]


def _innervar_suite(cfg, rep):
    c, s = cfg.exponents, cfg.quad_spec
    tau = float(cfg.params.get("tau", 0.1))
    w = M.small_zero_map(tau)
    x0 = w.singularity.point
    fields = [build_field(f) for f in cfg.params["fields"]] if "fields" in cfg.params else _triangle_fields(x0)
    for i, phi in enumerate(fields, 1):
        flux = F.innervar_derivative_flux(w, phi, c, s)
        vol = F.innervar_derivative_volume(w, phi, c, s)
        fd, _ = F.innervar_fd(w, phi, c, s)
        rep.track("volume phi%d" % i, vol)
        rep.close("flux vs volume phi%d" % i, vol.value, flux, rtol=1e-3)
        rep.close("flux vs FD phi%d" % i, fd, flux, rtol=1e-3)
        rep.close("volume vs FD phi%d" % i, fd, vol.value, rtol=1e-3)
    eps = float(cfg.params.get("eps", 1e-3))
    base = F.K_functional(M.inner_variation(w, M.bump_field((0, 0, 0), 0.5, (1, 0, 0), 0.02), 0.0), c, s).value
    for sign in (-1.0, 1.0):
        phi = M.bump_field((0, 0, 0), 0.5, (sign, 0.0, 0.0), dead_zone=0.02)
        xdot_x0 = float(-phi.pinned_value(x0) @ x0)
        want = -np.sign(xdot_x0)
        d = F.innervar_derivative_flux(w, phi, c, s)
        dk = F.K_functional(M.inner_variation(w, phi, eps), c, s).value - base
        lab = "phi(x0)=%+de1" % int(sign)
        rep.add("sign dK %s" % lab, d, 0.0, 0.0, np.sign(d) == want, "expected sign %+d" % want)
        rep.add("sign K(w^eps)-K(w) %s" % lab, dk, 0.0, 0.0, np.sign(dk) == want, "expected sign %+d" % want)


def _tau_scan(cfg, rep):
    c, s = cfg.exponents, cfg.quad_spec
    taus = cfg.ladder("tau", [0.1, 0.05, 0.025, 0.0125])
    diffs = []
    for tau in taus:
        r = F.K_functional(M.small_zero_map(tau, int(cfg.params.get("N", 8))), c, s)
        rep.track("K tau=%g" % tau, r)
        diffs.append(abs(r.value - c.identity_value))
    fit = fit_rate(taus, diffs)
    rep.summary["differences"] = diffs
    rep.add("rate slope", fit.slope, c.theta, 0.3, abs(fit.slope - c.theta) <= 0.3, "log-log slope of |K(g)-K(i)|")


def notdiff_integrand(absolute):
    def f(y):
        r = t3.norm(y)
        val = (1.0 - 3.0 * (y[:, 0] / r) ** 2) / r**3
        return np.abs(val) if absolute else val

    return f


NOTDIFF_SHELL = 16.0 * math.pi * math.log(2.0) / (3.0 * math.sqrt(3.0))


def _divergence_probe(cfg, rep):
    s = cfg.quad_spec
    radii = cfg.ladder("a", [0.2, 0.1, 0.05, 0.025])
    fa, fs = notdiff_integrand(True), notdiff_integrand(False)
    # the sign of 1 - 3 y1^2 / |y|^2 changes on the cone y1^2 = |y|^2 / 3
    cone = dict(axis=(1.0, 0.0, 0.0), u_breaks=(-1.0 / math.sqrt(3.0), 1.0 / math.sqrt(3.0)))
    for a in radii:
        v = integrate_shell(fa, a, 2 * a, s, **cone)
        rep.close("abs shell a=%g" % a, v, NOTDIFF_SHELL, rtol=1e-6, detail="a-independent positive value")
    signed = max(abs(integrate_shell(fs, a, 2 * a, s, **cone)) for a in radii)
    rep.add("signed shells", signed, 0.0, 1e-8, signed < 1e-8)
    r = integrate_ball(fa, resolve(s), strict=False)
    rep.quad_errors["abs ball"] = r.error
    rep.add("abs ball non-convergence", float(not r.converged), 1.0, 0.0, not r.converged, "ladder must not settle")


def _mollify_suite(cfg, rep):
    c, s = cfg.exponents, cfg.quad_spec
    w = build_map(cfg.map) if cfg.map else M.cavity_map(0.4)
    js = [int(j) for j in cfg.ladder("j", [3, 4, 5])]
    norms = []
    for j in js:
        b = M.mollified_blend(w, j)
        lhs = F.shell_gradient_mass(b, 2.0 ** -(j + 1), 2.0**-j, s, breaks=b.interfaces)
        rhs = F.shell_gradient_mass(w, 2.0 ** -(j + 2), 2.0 ** (1 - j), s, breaks=w.interfaces)
        rep.add("shell mass j=%d" % j, lhs, rhs, 0.0, lhs <= rhs, "blend mass <= mass of the wider shell")
        norms.append(F.gradient_distance(b, w, c.two_q, 2.0 ** -(j + 3), s, breaks=b.interfaces))
    target = 3.0 / c.two_q - 1.0
    fit = fit_rate([2.0**-j for j in js], norms)
    rep.summary["norms"] = norms
    rep.add("W1,2q decay slope", fit.slope, target, 0.3, abs(fit.slope - target) <= 0.3)


_MOTION_F = {
    "one": lambda q: (lambda t: 1.0),
    "power": lambda q: (lambda t: t ** (2 * q - 2)),
    "oscillating": lambda q: (lambda t: t ** (2 * q - 2) * (2.0 + math.sin(1.0 / t))),
}


def _zero_motion_scan(cfg, rep):
    c, s = cfg.exponents, cfg.quad_spec
    name = cfg.params.get("f", "one")
    if name not in _MOTION_F:
        raise ConfigError("zero-motion-scan f must be one of %s" % sorted(_MOTION_F))
    taus = cfg.ladder("tau", [0.1, 0.05, 0.025, 0.0125])
    rows = F.zero_motion_scan(_MOTION_F[name](c.q), taus, c, s)
    rep.summary["rows"] = rows
    for r in rows:
        rep.close("dK tau=%g" % r["tau"], r["dK"], r["prediction"], rtol=1e-8, detail="4 pi tau^(2-2q) f(tau)")


SCENARIOS = {
    "identity-suite": (_identity_suite, "bracket, adjugate and cofactor identities on random matrices"),
    "radial-suite": (_radial_suite, "I and K of the identity and of radial cavitation maps"),
    "circle-suite": (_circle_suite, "G and K are unchanged by the circle map"),
    "stationarity-suite": (_stationarity_suite, "first variation of K vanishes for maps with a discontinuity"),
    "path-scan": (_path_scan, "K is constant along the path from a hold map to the identity"),
    "innervar-suite": (_innervar_suite, "flux, volume and finite-difference inner-variation derivatives"),
    "tau-scan": (_tau_scan, "K(g) - K(i) decays like tau^(3-2q) for the small-zero family"),
    "divergence-probe": (_divergence_probe, "detection of a log-divergent integrand"),
    "mollify-suite": (_mollify_suite, "shell-mass bound and W1,2q convergence of mollified blends"),
    "zero-motion-scan": (_zero_motion_scan, "inner-variation derivative with prescribed zero motion"),
}


def run_scenario(cfg):
    rep = RunReport(cfg.scenario, cfg.echo())
    t0 = time.perf_counter()
    SCENARIOS[cfg.scenario][0](cfg, rep)
    rep.timings["seconds"] = round(time.perf_counter() - t0, 3)
    return rep


# ---------------------------------------------------------------- CLI


def _parser():
    p = argparse.ArgumentParser(prog="cavlab", description="Run numerical checks on cavitation functionals.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("list", help="list scenarios")
    r = sub.add_parser("run", help="run one scenario")
    r.add_argument("scenario")
    r.add_argument("--config", help="JSON config file (schema 1)")
    r.add_argument("--q", type=float)
    r.add_argument("--quad", help="quadrature preset: fast, default or paranoid")
    r.add_argument("--out", help="report path (default ./reports/<scenario>-<timestamp>.<format>)")
    r.add_argument("--format", choices=("json", "csv"))
    return p


def main(argv=None):
    args = _parser().parse_args(argv)
    if args.command == "list":
        for name, (_, desc) in SCENARIOS.items():
            print("%-20s %s" % (name, desc))
        return 0
    try:
        data = {}
        if args.config:
            try:
                data = json.loads(Path(args.config).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError("cannot read config %s: %s" % (args.config, exc)) from exc
            if data.get("scenario", args.scenario) != args.scenario:
                raise ConfigError("config scenario %r does not match %r" % (data["scenario"], args.scenario))
        cfg = ScenarioConfig.from_dict(
            data, scenario=args.scenario, q=args.q, quad=args.quad, out=args.out, format=args.format
        )
        rep = run_scenario(cfg)
    except ConfigError as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return 2
    out = cfg.out
    if out is None:
        stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
        out = Path("reports") / ("%s-%s.%s" % (cfg.scenario, stamp, cfg.format))
    path = emit_report(rep, out, cfg.format)
    for c in rep.checks:
        print("%-4s %-34s value=%-12.6g ref=%-12.6g tol=%.3g" % (c.status, c.name, c.value, c.reference, c.tolerance))
    for name in rep.nonconverged:
        print("fail quadrature did not converge: %s" % name)
    print("%s: %s (%s)" % (cfg.scenario, "PASS" if rep.passed else "FAIL", path))
    return 0 if rep.passed else 1


if __name__ == "__main__":
    sys.exit(main())
