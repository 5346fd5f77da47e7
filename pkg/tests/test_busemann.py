import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rwrp.busemann import (
    TiltSpec,
    approx_busemann,
    cesaro_mean,
    fatou_bound,
    field_cocycle,
    loggamma_environment,
    loggamma_mean_vector,
    loggamma_shape,
    lpp_characteristic_alpha,
    lpp_environment,
    lpp_mean_vector,
    make_tilt_spec,
    mean_vector,
    p2l_free_energy,
    recovery_residual,
    staircase_increments,
    stationary_loggamma_cocycle,
    stationary_lpp_cocycle,
    telescope_to_cocycle,
    trap_cocycle,
    trap_environment,
    user_cocycle,
)
from rwrp.energy import unrestricted_logZ
from rwrp.errors import (
    AlphaOutOfRange,
    DisconnectedWindow,
    EmptySlab,
    LambdaSignViolation,
    LevelBelowAnchor,
    NegativePotential,
    NoZeroLoop,
    NotInRelativeInterior,
    ParamOutOfRange,
    RankDeficientProbes,
    WidthTooSmall,
)
from rwrp.gibbs import geodesic_path
from rwrp.instances import bundled_directed_cocycle, bundled_directed_instance, loop_box_cocycle, loop_box_instance
from rwrp.lattice import (
    SiteWindow,
    enumerate_faces,
    exponential,
    full_face,
    make_environment,
    make_step_set,
    table_environment,
)

E2 = [(1, 0), (0, 1)]
NN2 = [(1, 0), (-1, 0), (0, 1), (0, -1)]


def e2_face():
    return full_face(make_step_set(2, E2))


def nn_face():
    return full_face(make_step_set(2, NN2))


# --- tilt specifications ---------------------------------------------------------


@pytest.mark.parametrize("m", [(0.3, -0.2), (2.0, 2.0), (-1.0, 0.5)])
def test_directed_tilt(m):
    spec = make_tilt_spec(e2_face(), 1.0, (0.5, 0.5), m)
    assert spec.uhat == (1.0, 1.0)
    assert np.allclose(spec.h, (1 - m[0], 1 - m[1]))
    assert np.dot(spec.uhat, spec.xi) == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(np.subtract(spec.uhat, spec.h), m)
    assert spec.epsilon == 0.0 and spec.case == "directed"


def test_loop_case_tilt():
    m = (-1.0, 0.0)
    spec = make_tilt_spec(nn_face(), 1.0, (1.0, 0.0), m, lambda_xi=-1.0)
    assert np.allclose(spec.uhat, (1.0, 0.0))
    assert np.allclose(spec.h, (2.0, 0.0))
    assert np.dot(spec.uhat, spec.xi) == pytest.approx(1.0)
    assert spec.epsilon > 0
    assert spec.slab_width > 2 * spec.r0


def test_tilt_errors():
    with pytest.raises(WidthTooSmall):
        make_tilt_spec(e2_face(), 1.0, (0.5, 0.5), (1.0, 1.0), slab_factor=1.5)
    with pytest.raises(LambdaSignViolation):
        make_tilt_spec(nn_face(), 1.0, (1.0, 0.0), (0.5, 0.0), lambda_xi=0.5)
    with pytest.raises(LambdaSignViolation):
        make_tilt_spec(nn_face(), 1.0, (1.0, 0.0), (-0.5, 0.0))
    with pytest.raises(NotInRelativeInterior):
        make_tilt_spec(e2_face(), 1.0, (1.0, 0.0), (1.0, 1.0))
    with pytest.raises(NotInRelativeInterior):
        make_tilt_spec(e2_face(), 1.0, (-1.0, 0.5), (1.0, 1.0))


def test_tilt_text_roundtrip():
    spec = make_tilt_spec(nn_face(), 2.0, (1.0, 0.0), (-1.5, 0.25), lambda_xi=-1.5, epsilon=0.03)
    again = TiltSpec.from_text(spec.to_text())
    assert again.uhat == spec.uhat and again.h == spec.h and again.epsilon == spec.epsilon
    assert again.face.member_indices == spec.face.member_indices


# --- point-to-level free energies -------------------------------------------------


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([1.0, 2.5]), st.sampled_from([0.0, 0.1]))
def test_p2l_matches_sum_over_slab(seed, beta, eps):
    ss = make_step_set(2, E2)
    env = make_environment("vertex_iid", ss, seed, exponential(1.0))
    spec = make_tilt_spec(full_face(ss), beta, (0.5, 0.5), (0.8, 1.3), epsilon=eps)
    t = 6.5
    val = p2l_free_energy(env, spec, (0, 0), t)
    terms = []
    for a in range(0, 13):
        for b in range(0, 13):
            if t <= a + b < t + spec.slab_width:
                lz = unrestricted_logZ(env, ss, None, (0, 0), (a, b), beta)
                terms.append(lz + beta * np.dot(spec.h, (a, b)) - eps * (a + b))
    m = max(terms)
    expect = (m + math.log(sum(math.exp(x - m) for x in terms))) / beta
    assert val == pytest.approx(expect, abs=1e-10)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31), st.tuples(st.integers(0, 5), st.integers(0, 5)))
def test_p2l_shift_covariance_is_exact_without_eps(seed, y):
    ss = make_step_set(2, E2)
    env = make_environment("directed_edge_iid", ss, seed, exponential(1.0))
    spec = make_tilt_spec(full_face(ss), 1.0, (0.5, 0.5), (1.2, 0.9))
    t = 20.0
    lhs = p2l_free_energy(env, spec, y, t)
    rhs = p2l_free_energy(env.rerooted(y), spec, (0, 0), t - spec.level(y))
    assert lhs == pytest.approx(rhs, abs=1e-11)


def test_wider_slab_never_lowers_passage_value():
    ss = make_step_set(2, E2)
    env = lpp_environment(5)
    narrow = make_tilt_spec(full_face(ss), math.inf, (0.5, 0.5), (2.0, 2.0), slab_factor=2.1)
    wide = make_tilt_spec(full_face(ss), math.inf, (0.5, 0.5), (2.0, 2.0), slab_factor=4.0)
    for t in (5.0, 12.0, 30.0):
        assert p2l_free_energy(env, wide, (0, 0), t) >= p2l_free_energy(env, narrow, (0, 0), t)


def test_level_must_be_above_anchor():
    ss, env = bundled_directed_instance()
    spec = make_tilt_spec(full_face(ss), 1.0, (0.5, 0.5), (-0.5, -0.5))
    with pytest.raises(LevelBelowAnchor):
        p2l_free_energy(env, spec, (3, 3), 5.0)


def test_empty_slab_inside_a_small_box():
    ss, env, _ = loop_box_instance(size=4)
    spec = make_tilt_spec(full_face(ss), 1.0, (1.0, 0.0), (-1.2, 0.0), lambda_xi=-1.2)
    with pytest.raises(EmptySlab):
        p2l_free_energy(env, spec, (0, 0), 20.0, box=((-2, -2), (2, 2)))


# --- pre-limit fields ---------------------------------------------------------------


def test_bundled_recovery_is_exact():
    coc, env = bundled_directed_cocycle()
    assert recovery_residual(coc, env, SiteWindow.box((0, 0), (6, 6)), 1.0) < 1e-10


@pytest.mark.parametrize("beta", [0.5, 1.0, math.inf])
def test_loop_box_recovery_is_exact(beta):
    coc, env, box = loop_box_cocycle(beta=beta, size=6)
    assert recovery_residual(coc, env, SiteWindow.box(*box), beta) < 1e-10


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([0.7, 1.0, math.inf]), st.sampled_from(["vertex_iid", "directed_edge_iid"]))
def test_directed_recovery_for_random_environments(seed, beta, kind):
    ss = make_step_set(2, [(1, 0), (0, 1), (1, 1)])
    env = make_environment(kind, ss, seed, exponential(1.0), sign=-1.0 if math.isinf(beta) else 1.0)
    spec = make_tilt_spec(full_face(ss), beta, (0.4, 0.6), (0.3, 0.1))
    win = SiteWindow.box((0, 0), (5, 5))
    fld = approx_busemann(env, spec, win, 25.0)
    assert recovery_residual(field_cocycle(fld), env, win, beta) < 1e-10


def test_flat_environment_gives_zero_field():
    ss = make_step_set(2, E2)
    env = table_environment(ss, {}, default=0.0)
    spec = make_tilt_spec(full_face(ss), 1.0, (0.5, 0.5), (1.0, 1.0))
    assert spec.h == (0.0, 0.0)
    win = SiteWindow.box((0, 0), (4, 4))
    fld = approx_busemann(env, spec, win, 15.0)
    assert np.max(np.abs(fld.values)) < 1e-12
    assert np.allclose(mean_vector(field_cocycle(fld)).m, 0.0, atol=1e-12)


def test_telescoping_is_path_independent():
    ss, env = bundled_directed_instance()
    spec = make_tilt_spec(full_face(ss), 1.0, (0.5, 0.5), (-0.5, -0.5))
    win = SiteWindow.box((0, 0), (5, 5))
    fld = approx_busemann(env, spec, win, 20.0)
    coc = telescope_to_cocycle(fld)
    F = {tuple(s): f for s, f in zip(fld.sites.tolist(), fld.free_energy)}
    h = np.asarray(spec.h)
    for x, y in [((0, 0), (5, 5)), ((1, 4), (3, 2)), ((5, 0), (0, 5))]:
        expect = F[x] - F[y] - h @ np.subtract(y, x)
        assert coc.B(x, y) == pytest.approx(expect, abs=1e-10)
        assert coc.B(y, x) == pytest.approx(-expect, abs=1e-10)
    # two monotone routes from (0,0) to (2,2)
    right_up = fld.value((0, 0), (1, 0)) + fld.value((1, 0), (1, 0)) + fld.value((2, 0), (0, 1)) + fld.value((2, 1), (0, 1))
    up_right = fld.value((0, 0), (0, 1)) + fld.value((0, 1), (0, 1)) + fld.value((0, 2), (1, 0)) + fld.value((1, 2), (1, 0))
    assert right_up == pytest.approx(up_right, abs=1e-12)


def test_loop_box_telescoping():
    coc, env, box = loop_box_cocycle(size=5)
    for x, y in [((0, 0), (5, 5)), ((4, 1), (1, 3))]:
        assert coc.B(x, y) == pytest.approx(-coc.B(y, x), abs=1e-12)
        mid = (x[0], y[1])
        assert coc.B(x, y) == pytest.approx(coc.B(x, mid) + coc.B(mid, y), abs=1e-10)


def test_disconnected_window():
    ss, env = bundled_directed_instance()
    spec = make_tilt_spec(full_face(ss), 1.0, (0.5, 0.5), (-0.5, -0.5))
    win = SiteWindow.from_sites([(0, 0), (3, 3)])
    with pytest.raises(DisconnectedWindow):
        telescope_to_cocycle(approx_busemann(env, spec, win, 12.0))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31), st.tuples(st.integers(0, 4), st.integers(0, 4)))
def test_shift_covariance_with_eps(seed, y):
    ss = make_step_set(2, E2)
    env = make_environment("directed_edge_iid", ss, seed, exponential(1.0))
    eps, beta = 0.1, 1.0
    spec = make_tilt_spec(full_face(ss), beta, (0.5, 0.5), (1.1, 0.7), epsilon=eps)
    t = 25.0
    x, z = np.array([1, 2]), (1, 0)
    win = SiteWindow.box(x + np.array(y), x + np.array(y))
    here = approx_busemann(env, spec, win, t).value(tuple(x + np.array(y)), z)
    there = approx_busemann(env.rerooted(y), spec, SiteWindow.box(x, x), t - spec.level(y)).value(tuple(x), z)
    assert abs(here - there) <= 2 * eps * sum(y) / beta + 1e-12


# --- recovery residual edge cases ------------------------------------------------------


def test_zero_cocycle_on_zero_potential():
    ss = make_step_set(2, E2)
    env = table_environment(ss, {}, default=0.0)
    coc = user_cocycle(ss, ((0, 0), (4, 4)), 0.0)
    assert recovery_residual(coc, env, SiteWindow.box((0, 0), (3, 3)), 1.0) == 0.0


@pytest.mark.parametrize("c", [0.4, -0.7])
def test_zero_cocycle_on_constant_potential(c):
    ss = make_step_set(2, E2)
    env = table_environment(ss, {}, default=c)
    coc = user_cocycle(ss, ((0, 0), (4, 4)), 0.0)
    assert recovery_residual(coc, env, SiteWindow.box((0, 0), (3, 3)), 1.0) == pytest.approx(abs(math.exp(-c) - 1), abs=1e-15)


# --- Cesàro averages --------------------------------------------------------------


def test_cesaro_on_flat_environment():
    ss = make_step_set(2, E2)
    spec = make_tilt_spec(full_face(ss), 1.0, (0.5, 0.5), (1.0, 1.0))
    res = cesaro_mean(lambda s: table_environment(ss, {}, default=0.0), spec, 30, 100, [((0, 0), (1, 0)), ((2, 1), (0, 1))])
    assert np.max(np.abs(res.mean)) < 1e-12 and np.max(res.se) < 1e-12


def test_cesaro_lpp_matches_boundary_mean():
    spec = make_tilt_spec(full_face(make_step_set(2, E2)), math.inf, (0.5, 0.5), tuple(lpp_mean_vector(0.5)))
    probes = [((0, 0), (1, 0)), ((0, 0), (0, 1))]
    res = cesaro_mean(lpp_environment, spec, 200, 100, probes, seed=1)
    for j, (_, z) in enumerate(probes):
        target = float(lpp_mean_vector(0.5) @ np.asarray(z))
        assert abs(res.mean[j] - target) <= 3 * res.se[j]
    assert res.lower_bound_ok


def test_cesaro_eps_gap_within_fatou_allowance():
    mu = 2.0
    m = tuple(loggamma_mean_vector(mu, 1.0))
    face = full_face(loggamma_environment(mu, 0).step_set)
    probes = [((1, 1), (1, 0)), ((2, 0), (0, 1))]
    eps = 0.02
    plain = cesaro_mean(lambda s: loggamma_environment(mu, s), make_tilt_spec(face, 1.0, (0.5, 0.5), m), 60, 100, probes, seed=2)
    spec = make_tilt_spec(face, 1.0, (0.5, 0.5), m, epsilon=eps)
    tilted = cesaro_mean(lambda s: loggamma_environment(mu, s), spec, 60, 100, probes, seed=2)
    for j, (x, z) in enumerate(probes):
        allowance = eps * (sum(x) + sum(np.add(x, z)))
        assert abs(tilted.mean[j] - plain.mean[j]) <= allowance
        assert fatou_bound(spec, x, z) == pytest.approx(np.dot(m, z) + allowance)
    assert plain.lower_bound_ok and tilted.lower_bound_ok


def test_cesaro_needs_samples():
    spec = make_tilt_spec(e2_face(), 1.0, (0.5, 0.5), (1.0, 1.0))
    with pytest.raises(ValueError):
        cesaro_mean(lpp_environment, spec, 10, 50, [((0, 0), (1, 0))])


@pytest.mark.parametrize("n", [50, 100, 200])
def test_free_energy_growth_sandwich(n):
    """(1/n) F_{0,n} approaches 1 from above at the characteristic tilt of the log-gamma model."""
    mu = 2.0
    m = loggamma_mean_vector(mu, 1.0)
    spec = make_tilt_spec(full_face(loggamma_environment(mu, 0).step_set), 1.0, (0.5, 0.5), tuple(m))
    vals = np.array([p2l_free_energy(loggamma_environment(mu, 1000 + s), spec, (0, 0), float(n)) / n for s in range(20)])
    se = vals.std(ddof=1) / math.sqrt(len(vals))
    assert 1.0 - 3 * se <= vals.mean() <= 1.0 + 4.0 / n + 3 * se


# --- exponential LPP oracle ------------------------------------------------------------


def test_single_cell_update_preserves_boundary_law():
    """Independent Monte Carlo of one corner-growth cell: I' = ω + (I−J)^+, J' = ω + (J−I)^+."""
    rng = np.random.default_rng(20240611)
    alpha, n = 0.3, 1_000_000
    I = rng.exponential(1 / alpha, n)
    J = rng.exponential(1 / (1 - alpha), n)
    w = rng.exponential(1.0, n)
    I2, J2 = w + np.maximum(I - J, 0), w + np.maximum(J - I, 0)
    assert abs(I2.mean() - 1 / alpha) < 3 * I2.std() / math.sqrt(n)
    assert abs(J2.mean() - 1 / (1 - alpha)) < 3 * J2.std() / math.sqrt(n)
    assert abs(np.corrcoef(I2, J2)[0, 1]) < 3 / math.sqrt(n)
    assert abs(I2.var() - 1 / alpha**2) < 0.05 / alpha**2


@pytest.mark.parametrize("alpha", [0.3, 0.5, 0.8])
def test_lpp_cocycle_recovers(alpha):
    coc, env = stationary_lpp_cocycle(alpha, 40, 7)
    assert recovery_residual(coc, env, SiteWindow.box((0, 0), (38, 38)), math.inf) < 1e-12
    assert coc.B((0, 0), (1, 1)) == pytest.approx(coc.B((0, 0), (1, 0)) + coc.B((1, 0), (1, 1)), abs=1e-12)
    assert coc.B((0, 0), (1, 1)) == pytest.approx(coc.B((0, 0), (0, 1)) + coc.B((0, 1), (1, 1)), abs=1e-12)


def test_lpp_staircase_law():
    alpha = 0.3
    hs, vs = [], []
    for s in range(30):
        coc, _ = stationary_lpp_cocycle(alpha, 60, s)
        h, v = staircase_increments(coc, (0, 59), 59)
        hs.append(h)
        vs.append(v)
    hs, vs = np.concatenate(hs), np.concatenate(vs)
    assert abs(hs.mean() - 1 / alpha) <= 3 * hs.std() / math.sqrt(len(hs))
    assert abs(vs.mean() - 1 / (1 - alpha)) <= 3 * vs.std() / math.sqrt(len(vs))


def test_lpp_characteristic_direction():
    assert lpp_characteristic_alpha((0.5, 0.5)) == pytest.approx(0.5)
    assert 2 * float(lpp_mean_vector(0.5) @ np.array([0.5, 0.5])) == pytest.approx(4.0)
    a = lpp_characteristic_alpha((0.2, 0.8))
    grid = np.linspace(0.01, 0.99, 9801)
    assert a == pytest.approx(grid[np.argmin(0.2 / grid + 0.8 / (1 - grid))], abs=1e-3)


def test_lpp_mean_vector_and_held_out_probe():
    alpha = 0.3
    cocs = [stationary_lpp_cocycle(alpha, 30, s)[0] for s in range(20)]
    mv = mean_vector(cocs)
    target = lpp_mean_vector(alpha)
    assert np.all(np.abs(mv.m - target) <= 3 * mv.se)
    diag = np.array([c.B((5, 5), (6, 6)) for c in cocs])
    assert abs(diag.mean() - mv.m.sum()) <= 3 * math.hypot(diag.std(ddof=1) / math.sqrt(len(diag)), np.linalg.norm(mv.se))


def test_lpp_alpha_range():
    for a in (0.0, 1.0, -0.2):
        with pytest.raises(AlphaOutOfRange):
            stationary_lpp_cocycle(a, 10, 0)


# --- log-gamma oracle ------------------------------------------------------------------


def test_loggamma_recovery_and_plaquettes():
    coc, env = stationary_loggamma_cocycle(2.0, 30, 3)
    assert recovery_residual(coc, env, SiteWindow.box((0, 0), (28, 28)), 1.0) < 1e-10
    sites = SiteWindow.box((0, 0), (27, 27)).sites()
    a = coc.increment(sites, 0) + coc.increment(sites + np.array([1, 0]), 1)
    b = coc.increment(sites, 1) + coc.increment(sites + np.array([0, 1]), 0)
    assert np.max(np.abs(a - b)) < 1e-12


def test_loggamma_symmetric_point():
    cocs = [stationary_loggamma_cocycle(2.0, 25, s)[0] for s in range(20)]
    mv = mean_vector(cocs)
    assert abs(mv.m[0] - mv.m[1]) <= 3 * math.hypot(*mv.se)
    assert np.allclose(loggamma_mean_vector(2.0, 1.0), loggamma_shape(2.0, (0.5, 0.5)) * 2 * np.array([0.5, 0.5]) / 1.0)


def test_loggamma_parameter_checks():
    with pytest.raises(ParamOutOfRange):
        stationary_loggamma_cocycle(-1.0, 10, 0)
    with pytest.raises(ParamOutOfRange):
        stationary_loggamma_cocycle(2.0, 10, 0, beta=2.0)
    with pytest.raises(ParamOutOfRange):
        stationary_loggamma_cocycle(2.0, 10, 0, theta=2.5)


# --- trap cocycle ----------------------------------------------------------------------


def trap_setup():
    ss = make_step_set(2, NN2)
    env = trap_environment(ss, [(0, 0), (1, 0), (1, 1), (0, 1)])
    return ss, env, ((-5, -5), (5, 5))


def test_trap_cocycle_recovers():
    ss, env, box = trap_setup()
    coc = trap_cocycle(env, None, box)
    assert coc.trap
    assert recovery_residual(coc, env, SiteWindow.box((-4, -4), (4, 4)), math.inf) < 1e-10


def test_trap_geodesic_never_leaves_the_loop():
    ss, env, box = trap_setup()
    coc = trap_cocycle(env, None, box)
    path = geodesic_path(coc, env, (0, 0), 10_000)
    sites = {tuple(p) for p in np.asarray(path.sites).tolist()}
    assert sites <= {(0, 0), (1, 0), (1, 1), (0, 1)}
    V = env.values_all(np.asarray(path.sites)[:-1])
    steps = [ss.index(tuple(z)) for z in np.diff(np.asarray(path.sites), axis=0).tolist()]
    assert np.all(V[np.arange(len(steps)), steps] == 0.0)


def test_trap_errors():
    ss = make_step_set(2, NN2)
    with pytest.raises(NoZeroLoop):
        trap_cocycle(table_environment(ss, {}, default=1.0), None, ((-3, -3), (3, 3)))
    neg = trap_environment(ss, [(0, 0), (1, 0)], extra={((2, 2), (1, 0)): -1.0})
    with pytest.raises(NegativePotential):
        trap_cocycle(neg, None, ((-3, -3), (3, 3)))


def test_rank_deficient_probes():
    ss = make_step_set(2, [(1, 0), (0, 1)])
    axis = [f for f in enumerate_faces(ss) if f.member_steps == ((1, 0),)][0]
    coc = user_cocycle(ss, ((0, 0), (3, 3)), 1.0, face=axis)
    with pytest.raises(RankDeficientProbes):
        mean_vector(coc)


def test_cocycle_dump_lists_every_increment():
    coc, _ = bundled_directed_cocycle(window=3)
    rows = [r for r in coc.to_text().splitlines() if r and not r.startswith("#")]
    assert rows[0] == "x0,x1,z0,z1,B"
    assert len(rows) - 1 == int(np.isfinite(coc.inc).sum())
