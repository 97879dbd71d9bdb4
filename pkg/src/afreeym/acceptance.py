"""The ten end-to-end acceptance checks, each returning a small report dict.

Each check is runnable on its own (``afreeym acceptance K``) and from
``tests/test_acceptance.py``.  Oracles used here are independent of the code
under test: closed forms, a 1D lower-hull convexification, and direct
quadrature.
"""
from __future__ import annotations

import time

import numpy as np

from . import envelope as env
from .flat_metric import PointCloudMeasure, bl_distance, bl_norm, hstar_distance
from .generation import (bump_potential, combine, concentrating_spike, empirical_ym, field_pairings,
                         generate_levels, jet_l1, make_bank, plane_wave, square_profile, tile,
                         tile_potential, verify_generation)
from .integrands import (abs_diff_integrand, area_integrand, clarke_support_function, linear_integrand,
                         norm_integrand, two_well_integrand)
from .operator_symbols import CATALOG, check_constant_rank, cone_samples, verify_exactness
from .young_measures import (homogeneous_measure, jensen_regular, jensen_singular, load_ym,
                             strengthened_jensen, ym_to_pair)


def _timed(fn):
    def run(**kw):
        t0 = time.perf_counter()
        out = fn(**kw)
        out["seconds"] = time.perf_counter() - t0
        return out
    run.__name__ = fn.__name__
    run.__doc__ = fn.__doc__
    return run


@_timed
def criterion_1(seed=0, instances=100):
    """LP value of a positive measure equals its total mass."""
    rng = np.random.default_rng(seed)
    worst_err, worst_time = 0.0, 0.0
    for _ in range(instances):
        k = int(rng.integers(1, 51))
        n = int(rng.integers(1, 4))
        metric = ("linf", "euclidean")[int(rng.integers(2))]
        mu = PointCloudMeasure(rng.uniform(-2, 2, (k, n)), rng.uniform(0.01, 1, k), metric)
        t0 = time.perf_counter()
        val = bl_norm(mu)
        worst_time = max(worst_time, time.perf_counter() - t0)
        worst_err = max(worst_err, abs(val - mu.mass()))
    return {"passed": worst_err <= 1e-8 and worst_time < 1.0, "max_error": worst_err,
            "max_seconds": worst_time}


@_timed
def criterion_2(seed=0, instances=50):
    """Flat distance of two Diracs equals ``2d/(2+d)``."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        n = int(rng.integers(1, 4))
        metric = ("linf", "euclidean")[int(rng.integers(2))]
        x, y = rng.uniform(-3, 3, (2, n))
        d = float(np.abs(x - y).max() if metric == "linf" else np.linalg.norm(x - y))
        got = bl_distance(PointCloudMeasure(x[None], [1.0], metric), PointCloudMeasure(y[None], [1.0], metric))
        worst = max(worst, abs(got - 2 * d / (2 + d)))
    return {"passed": worst <= 1e-8, "max_error": worst}


@_timed
def criterion_3():
    """Constant rank and exactness of the catalog pairs; diag is reported non-constant."""
    t0 = time.perf_counter()
    out = {}
    ok = True
    for a, b in (("div2", "perp-grad2"), ("curl2-vec", "grad-scalar2")):
        rep = check_constant_rank(CATALOG[a], count=1000)
        ex = verify_exactness(CATALOG[a], CATALOG[b], samples=1000, rtol=1e-12)
        out[a] = {"rank": rep.sampled_rank, "exact": ex["passed"], "worst_ratio": ex["worst_ratio"]}
        ok &= rep.constant and ex["passed"]
    diag = check_constant_rank(CATALOG["diag2"], count=1000)
    out["diag2"] = {"rank": diag.sampled_rank, "witnesses": [(list(map(float, x)), int(r)) for x, r in diag.witnesses]}
    ok &= not diag.constant
    elapsed = time.perf_counter() - t0
    return {"passed": bool(ok and elapsed < 5.0), "details": out}


def _tiling_instance(N=256):
    return bump_potential(N, amplitude=0.05), np.array([0.2, 0.1])


@_timed
def criterion_4(N=256):
    """``|D^{l-1} tiled|_{L1} = |D^{l-1} u|_{L1} / j`` and bank pairings independent of j."""
    opB = CATALOG["perp-grad2"]
    u, z = _tiling_instance(N)
    bank = make_bank(2, 2, 5)
    base = field_pairings(tile(u, 1, z, opB), bank)
    l1 = jet_l1(u, opB.order)
    ratios, drift = {}, {}
    for j in (2, 4, 8):
        ratios[j] = jet_l1(tile_potential(u, j, opB.order), opB.order) / l1
        drift[j] = float(np.abs(field_pairings(tile(u, j, z, opB), bank) - base).max())
    rel = max(abs(r * j - 1) for j, r in ratios.items())
    return {"passed": rel <= 0.02 and max(drift.values()) <= 1e-2, "ratio_rel_error": rel,
            "ratios": ratios, "pairing_drift": drift}


@_timed
def criterion_5():
    """Mixture weight ``t = (p/q)^n`` of the convex-combination construction."""
    opB = CATALOG["perp-grad2"]
    z = np.array([0.2, 0.1])
    phis = [b.phi for b in make_bank(2, 2, 5)]
    worst = 0.0
    rows = []
    for p, q in ((1, 2), (1, 3), (2, 3)):
        N = 64 * q
        u0 = bump_potential(N, amplitude=0.05)
        u1 = bump_potential(N, amplitude=0.25, radius=0.3)
        t = (p / q) ** 2
        v = combine(u0, u1, p, q, z, opB)
        f0 = env.apply_B(opB, u0) + z
        f1 = env.apply_B(opB, u1) + z
        for f in phis:
            pred = (1 - t) * np.mean(f(f0.flat())) + t * np.mean(f(f1.flat()))
            got = np.mean(f(v.flat()))
            err = abs(got - pred) / max(abs(pred), 1e-12)
            worst = max(worst, err)
            rows.append({"p": p, "q": q, "integrand": f.name, "rel_error": float(err)})
    return {"passed": worst <= 0.02, "max_rel_error": worst, "rows": rows}


def convexify_1d(f, z, direction, half_width=4.0, points=4001):
    """Lower convex hull of ``s -> f(z + s e)`` evaluated at ``s = 0`` (monotone chain)."""
    e = np.asarray(direction, dtype=float)
    e = e / np.linalg.norm(e)
    s = np.linspace(-half_width, half_width, points)
    g = f(np.asarray(z, dtype=float) + s[:, None] * e)
    hull = []
    for p in zip(s, g):
        while len(hull) >= 2:
            (x1, y1), (x2, y2) = hull[-2], hull[-1]
            if (x2 - x1) * (p[1] - y1) - (y2 - y1) * (p[0] - x1) <= 0:
                hull.pop()
            else:
                break
        hull.append(p)
    hx, hy = np.array(hull).T
    return float(np.interp(0.0, hx, hy))


@_timed
def criterion_6(N=32):
    """Envelope sanity: convex entries, 1D oracle, rank-one two-well, and eps_sup independence."""
    div2, curl = CATALOG["div2"], CATALOG["curl2-vec"]
    lattice = [np.array(p, dtype=float) for p in
               ((0, 0), (1, 0), (0, 1), (-1, 0), (1, 1), (-1, 1), (0.5, 0.5), (2, 0), (0, -2), (1, -2))]
    a_err = 0.0
    for f in (norm_integrand(2), area_integrand(2), linear_integrand([1.0, -2.0])):
        for z in lattice:
            est = env.envelope_upper(f, z, div2, N=N, restarts=2)
            a_err = max(a_err, abs(est.value - float(f(z))))
    tw = two_well_integrand([1.0, 0.0], 0.1)
    # quarter-lattice points: the optimal laminate fractions are multiples of 1/8, which N=32 represents
    pts = [np.array(p, dtype=float) for p in ((0, 0), (0.5, 0.25), (-0.25, 1.0), (0.25, 0), (-0.5, 0.25),
                                              (0, -0.5), (0.75, 0), (0, 0.5), (-0.5, -0.5), (0.25, 0.75))]
    b_err = 0.0
    for z in pts:
        oracle = convexify_1d(tw, z, [1.0, 0.0])
        est = env.envelope_upper(tw, z, div2, N=N)
        b_err = max(b_err, abs(est.value - oracle) / oracle)
    tw0 = two_well_integrand([1.0, 0.0], 0.0)
    c_val = env.envelope_upper(tw0, np.zeros(2), curl, N=N).value
    d_rel = 0.0
    for z in (np.zeros(2), np.array([0.5, 0.3])):
        vals = [env.envelope_upper(tw, z, div2, N=N, eps_sup=e).value for e in (1.0, 0.1, 0.01)]
        d_rel = max(d_rel, (max(vals) - min(vals)) / min(vals))
    return {"passed": a_err <= 1e-6 and b_err <= 0.05 and c_val <= 0.05 and d_rel <= 0.02,
            "convex_max_error": a_err, "oracle_max_rel_error": b_err, "midpoint_value": c_val,
            "eps_sup_rel_change": d_rel}


def violation_fixture_path():
    from importlib.resources import files
    return str(files("afreeym") / "data" / "violation_fixture.json")


def violation_integrand_path():
    from importlib.resources import files
    return str(files("afreeym") / "data" / "two_well_identity.json")


def lamination_integrand(f, op, depth=2, cone_count=16):
    return env.lamination_envelope(f, cone_samples(op, count=cone_count), depth=depth).as_integrand()


@_timed
def criterion_7():
    """Jensen suites on laminate/spike empirical measures; the violation fixture is rejected."""
    div2 = CATALOG["div2"]
    convex = [norm_integrand(2), area_integrand(2), linear_integrand([1.0, 2.0])]
    lam = plane_wave(div2, [1, 0], [0.0, 1.0], square_profile(0.5), 8, 64) + np.array([0.3, 0.1])
    spike = concentrating_spike(div2, [1, 0], [0.0, 1.0], 1.0, [0.5, 0.5], [0.125], N=64)
    slack = np.inf
    for fld in (lam, spike.snapshots[-1]):
        for conc in ("diffuse", "atomic"):
            nu = empirical_ym(fld, cells=8, concentration=conc)
            r = jensen_regular(nu, convex)
            slack = min(slack, min(p["min_slack"] for p in r["per_integrand"]))
            s = jensen_singular(nu, convex)
            if s["worst"] is not None:
                slack = min(slack, s["worst"]["slack"])
    from .integrands import get_integrand
    fixture = load_ym(violation_fixture_path())
    f = get_integrand(violation_integrand_path())
    fl = lamination_integrand(f, CATALOG["curl2-mat"])
    rep = jensen_regular(fixture, [fl])
    gap = -rep["worst"]["relative_slack"] * 1.0
    raw_gap = -min(p["min_slack"] for p in rep["per_integrand"])
    return {"passed": slack >= -1e-3 and (not rep["passed"]) and raw_gap >= 0.05,
            "min_slack_generated": float(slack), "fixture_gap": raw_gap, "fixture_relative_gap": gap}


@_timed
def criterion_8(seed=0):
    """Clarke support function checks."""
    rng = np.random.default_rng(seed)
    probes = rng.normal(size=(100, 2))
    conv_err = 0.0
    for f in (norm_integrand(2), area_integrand(2), linear_integrand([1.0, -0.5])):
        G, _ = clarke_support_function(f)
        conv_err = max(conv_err, float(np.abs(G(probes) - f.recession(probes)).max()))
    cone_err = 0.0
    checks = [(norm_integrand(2), cone_samples(CATALOG["div2"], count=20)),
              (abs_diff_integrand(2), cone_samples(CATALOG["grad-last2"], count=20))]
    for f, cone in checks:
        G, _ = clarke_support_function(f)
        dirs = cone[np.arange(20) % len(cone)] * rng.uniform(0.5, 2.0, (20, 1))
        cone_err = max(cone_err, float(np.abs(G(dirs) - f.recession(dirs)).max()))
    consistent = True
    for f in (norm_integrand(2), area_integrand(2), abs_diff_integrand(2), two_well_integrand([1.0, 0.0], 0.1)):
        G, _ = clarke_support_function(f)
        for _ in range(10):
            k = int(rng.integers(1, 4))
            e = rng.normal(size=(k, 2))
            e /= np.linalg.norm(e, axis=1, keepdims=True)
            w = rng.dirichlet(np.ones(k))
            r = strengthened_jensen(w, e, f, G=G)
            consistent &= r["strengthened_slack"] <= r["weak_slack"] + 1e-6
    return {"passed": conv_err <= 1e-3 and cone_err <= 1e-3 and bool(consistent),
            "convex_max_error": conv_err, "cone_max_error": cone_err, "strengthened_le_weak": bool(consistent)}


COMPOSITE_LEVELS = [{"d": 2, "j": 4, "spike_j": 8}, {"d": 3, "j": 8, "spike_j": 4}, {"d": 4, "j": 16, "spike_j": 2}]


def composite_target():
    """Two-atom oscillation, diffuse concentration 0.5 along e1, one unit singular atom along e2."""
    return homogeneous_measure([[0.5, 0.3, 0.6], [0.5, 0.3, -0.4]], lam_a=0.5, sphere=[[1.0, 1.0, 0.0]],
                               grid=16, singular=[{"x": [0.5, 0.5], "mass": 1.0, "sphere": [[1.0, 0.0, 1.0]]}])


def composite_plan(eps=0.1, N=64):
    return generate_levels(composite_target(), CATALOG["div2"], CATALOG["perp-grad2"], N, COMPOSITE_LEVELS, eps)


@_timed
def criterion_9(eps=0.1):
    """Composite generation on a 64^2 grid: bank error <= 0.15 and decreasing; budgets below eps."""
    plan, reports = composite_plan(eps)
    rep = verify_generation(plan, composite_target())
    budgets = [(r["regular"]["budget"], r["singular"]["budget"]) for r in reports]
    ok_budget = all(b[0] < eps and b[1] < eps for b in budgets)
    strictly = all(b < a for a, b in zip(rep["errors"], rep["errors"][1:]))
    return {"passed": rep["final"] <= 0.15 and strictly and ok_budget, "errors": rep["errors"],
            "budgets": budgets}


@_timed
def criterion_10(cells=8, value_step=0.05):
    """hstar distance of empirical pair to target is nonincreasing over t = 1/4, 1/8, 1/16."""
    plan, _ = composite_plan()
    target = ym_to_pair(composite_target())
    dists = []
    for snap in plan.snapshots:
        nu = empirical_ym(snap, cells=cells, value_step=value_step)
        dists.append(hstar_distance(ym_to_pair(nu), target))
    ok = all(b <= a + 1e-12 for a, b in zip(dists, dists[1:]))
    return {"passed": ok, "distances": dists, "t": [2.0 ** -lv["d"] for lv in COMPOSITE_LEVELS]}


CRITERIA = {1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4, 5: criterion_5, 6: criterion_6,
            7: criterion_7, 8: criterion_8, 9: criterion_9, 10: criterion_10}
