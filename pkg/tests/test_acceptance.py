"""Acceptance battery: one test per numbered criterion.

Run with ``pytest tests/test_acceptance.py`` (a PASS/FAIL line per criterion is
printed in the terminal summary) or directly with ``python3 tests/test_acceptance.py``.
"""

import functools
import math
import time

import numpy as np

from cavlab import experiments as E
from cavlab import functionals as F
from cavlab import maps as M

CFG = F.ExponentConfig(1.25)
EIGHT_PI = 8 * math.pi


@functools.lru_cache(maxsize=None)
def scenario(name, quad="default"):
    t0 = time.perf_counter()
    rep = E.run_scenario(E.ScenarioConfig.from_dict({"schema": 1, "scenario": name, "quad": quad}))
    return rep, time.perf_counter() - t0


def checks(rep, prefix):
    return [c for c in rep.checks if c.name.startswith(prefix)]


def worst(cs):
    """Largest error-to-tolerance ratio in a group of checks."""
    return max(abs(c.value - c.reference) / c.tolerance if c.tolerance else 0.0 for c in cs)


def test_algebra_identities(criterion):
    rep, secs = scenario("identity-suite")
    ok = rep.passed and len(rep.checks) == 10 and secs < 5
    big = max(c.value for c in rep.checks)
    assert criterion(1, "algebra identities", ok, "max residual %.2e over 10^4 instances, %.1fs" % (big, secs))


def test_identity_values(criterion):
    t0 = time.perf_counter()
    ident = M.identity_map()
    errs = {}
    for quad, rtol in (("default", 1e-5), ("paranoid", 1e-7)):
        for name, fn in (("I", F.I_functional), ("K", F.K_functional)):
            r = fn(ident, CFG, quad)
            errs["%s/%s" % (name, quad)] = (abs(r.value - EIGHT_PI) / EIGHT_PI, rtol)
    secs = time.perf_counter() - t0
    ok = all(e <= tol for e, tol in errs.values()) and secs < 30
    detail = ", ".join("%s rel %.1e" % (k, e) for k, (e, _) in errs.items()) + ", %.1fs" % secs
    assert criterion(2, "I(i) = K(i) = 8 pi", ok, detail)


def test_radial_maps(criterion):
    rep, secs = scenario("radial-suite")
    cs = checks(rep, "I(")
    ok = rep.passed and len(cs) == 5 and secs < 120
    assert criterion(3, "radial maps keep I(i)", ok, "worst err/tol %.2e over %d maps, %.1fs" % (worst(cs), len(cs), secs))


def test_circle_map_invariance(criterion):
    rep, secs = scenario("circle-suite")
    g = checks(rep, "G pointwise")
    k = checks(rep, "K circle")
    ok = rep.passed and len(g) == 2 and len(k) == 2
    detail = "max G deviation %.1e, worst K err/tol %.2e" % (max(c.value for c in g), worst(k))
    assert criterion(4, "circle map leaves G and K unchanged", ok, detail)


def test_stationarity(criterion):
    rep, _ = scenario("stationarity-suite")
    d = checks(rep, "deltaK phi")
    fd = checks(rep, "deltaK vs FD")
    ok = len(d) == 2 and len(fd) == 2 and all(c.passed for c in d + fd) and not rep.nonconverged
    detail = "max |deltaK| %.1e (tol %.1e), FD agreement %s" % (
        max(abs(c.value) for c in d), d[0].tolerance, ", ".join(c.detail for c in fd)
    )
    assert criterion(5, "first variation of K vanishes", ok, detail)


def test_integration_by_parts(criterion):
    rep, _ = scenario("stationarity-suite")
    res = checks(rep, "ibp residual")
    # the identity singles out the v (x) F^T v ordering of the tensor product
    hold = M.hold_map(M.TwistShift(), 0.5)
    phi = E.default_fields()[0]
    good = F.ibp_terms(hold, phi, CFG).residual
    swapped = F.ibp_terms(hold, phi, CFG, ordering="Ftv,v").residual
    ok = len(res) == 2 and all(c.passed for c in res) and abs(good) < 1e-3 < abs(swapped)
    detail = "max residual %.1e; hold map residual %.1e vs %.2f with swapped ordering" % (
        max(abs(c.value) for c in res), abs(good), abs(swapped)
    )
    assert criterion(6, "integration-by-parts identity", ok, detail)


def test_path_invariance(criterion):
    t0 = time.perf_counter()
    rep, _ = scenario("path-scan")
    spread = rep.summary["relative_spread"]
    hold = M.hold_map(M.TwistShift(), 0.5)
    circ = M.circle_map(hold, 0.3)
    k_hold = F.K_functional(hold, CFG).value
    k_circ = F.K_functional(circ, CFG).value
    x = M._ball_sample(np.random.default_rng(0), 500)
    x = x[np.linalg.norm(x, axis=1) > 1e-3]
    start_ok = np.allclose(M.PathGamma(hold, 0.3, 0.0).value(x), circ.value(x))
    k_end = [c.value for c in rep.checks if c.name.endswith("t=1")][0]
    i_hold = F.I_functional(hold, CFG).value
    tol = 1e-3 * EIGHT_PI
    chain = [
        abs(k_circ - k_hold) <= tol,
        start_ok,
        abs(k_end - EIGHT_PI) <= tol,
        i_hold >= EIGHT_PI - tol,
    ]
    secs = time.perf_counter() - t0
    ok = spread < 1e-3 and all(chain) and not rep.nonconverged and secs < 300
    detail = "spread %.1e, K(circle)-K(hold) %.1e, I(hold)-I(i) %.3f, %.0fs" % (spread, k_circ - k_hold, i_hold - EIGHT_PI, secs)
    assert criterion(7, "K constant along the path, I(w) >= I(i)", ok, detail)


def test_inner_variation_triangle(criterion):
    rep, _ = scenario("innervar-suite")
    cs = [c for c in rep.checks if " vs " in c.name]
    ok = len(cs) == 6 and all(c.passed for c in cs) and not rep.nonconverged
    rel = max(abs(c.value - c.reference) / abs(c.reference) for c in cs)
    assert criterion(8, "flux, volume and FD derivatives agree", ok, "max pairwise rel %.1e over 2 fields" % rel)


def test_zero_motion_signs(criterion):
    rep, _ = scenario("innervar-suite")
    cs = checks(rep, "sign")
    ok = len(cs) == 4 and all(c.passed for c in cs)
    detail = ", ".join("%s=%.3g" % (c.name, c.value) for c in cs)
    assert criterion(9, "zero-motion signs", ok, detail)


def test_small_zero_rate(criterion):
    rep, _ = scenario("tau-scan")
    c = checks(rep, "rate slope")[0]
    ok = c.passed and abs(c.value - 0.5) <= 0.3 and not rep.nonconverged
    assert criterion(10, "K(g) - K(i) rate", ok, "slope %.4f (target 0.5 +- 0.3)" % c.value)


def test_nonintegrability_detection(criterion):
    rep, _ = scenario("divergence-probe")
    shells = checks(rep, "abs shell")
    vals = [c.value for c in shells]
    ok = rep.passed and min(vals) > 0 and (max(vals) - min(vals)) / max(vals) < 1e-6
    detail = "shell value %.8f on %d annuli, signed %.1e, ball ladder flagged" % (
        vals[0], len(vals), checks(rep, "signed")[0].value
    )
    assert criterion(11, "log-divergence detected", ok, detail)


def test_mollification(criterion):
    rep, _ = scenario("mollify-suite")
    shells = checks(rep, "shell mass")
    slope = checks(rep, "W1,2q")[0]
    ok = len(shells) == 3 and all(c.passed for c in shells) and slope.passed and not rep.nonconverged
    detail = "shell bound holds for j=3,4,5; decay slope %.3f (target %.1f +- 0.3)" % (slope.value, slope.reference)
    assert criterion(12, "mollified blends", ok, detail)


if __name__ == "__main__":
    import sys

    failed = 0

    def show(number, title, ok, detail=""):
        print("%s  %2d. %s | %s" % ("PASS" if ok else "FAIL", number, title, detail), flush=True)
        return ok

    for name, fn in list(globals().items()):
        if name.startswith("test_"):
            try:
                fn(show)
            except AssertionError:
                failed += 1
    sys.exit(1 if failed else 0)
