import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.spatial.transform import Rotation

from pbdreg.errors import DegenerateCluster, DegenerateConstraint, NonFiniteState, ValidationError
from pbdreg.pbd_core import (
    ConstraintSet,
    Distance,
    Grasp,
    ParticleSystem,
    Registration,
    ShapeMatch,
    SolverConfig,
    StepStats,
    Volume,
    eval_distance,
    eval_volume,
    registration_correction,
    simulate_step,
    solve_shape_match,
)

UNIT_TET = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
finite = st.floats(-2, 2, allow_nan=False, allow_infinity=False)
vec3 = st.tuples(finite, finite, finite).map(np.array)


def test_distance_at_rest():
    cost, (d1, d2) = eval_distance((0, 0, 0), (1, 0, 0), 1.0)
    assert cost == 0
    assert np.all(d1 == 0) and np.all(d2 == 0)


def test_distance_equal_mass_split():
    cost, (d1, d2) = eval_distance((0, 0, 0), (2, 0, 0), 1.0)
    assert cost == 1
    np.testing.assert_allclose(d1, [0.5, 0, 0])
    np.testing.assert_allclose(d2, [-0.5, 0, 0])


def test_distance_zero_length():
    with pytest.raises(DegenerateConstraint):
        eval_distance((0, 0, 0), (0, 0, 0), 1.0)


def test_distance_rejects_nonpositive_rest():
    with pytest.raises(ValidationError):
        eval_distance((0, 0, 0), (1, 0, 0), 0.0)


def test_distance_mass_weighting():
    # particle 1 is fixed: all of the correction goes to particle 2
    cost, (d1, d2) = eval_distance((0, 0, 0), (3, 0, 0), 1.0, w1=0.0, w2=1.0)
    assert np.all(d1 == 0)
    np.testing.assert_allclose(d2, [-2.0, 0, 0])


@pytest.mark.parametrize(
    "pts, v0, expected",
    [
        (UNIT_TET, 1 / 6, 0.0),
        (np.vstack([UNIT_TET[:3], [0, 0, 0]]), 1 / 6, -1 / 6),
        (2 * UNIT_TET, 1 / 6, 7 / 6),
    ],
)
def test_volume_cost(pts, v0, expected):
    cost, _ = eval_volume(*pts, v0)
    assert cost == pytest.approx(expected, abs=1e-15)


def test_volume_correction_restores_volume():
    pts = 1.1 * UNIT_TET
    cost, corr = eval_volume(*pts, 1 / 6)
    assert cost > 0
    new_cost, _ = eval_volume(*(pts + corr), 1 / 6)
    # first-order projection: residual drops to second order
    assert abs(new_cost) < 0.1 * abs(cost)


def test_volume_degenerate():
    pts = np.zeros((4, 3))
    with pytest.raises(DegenerateConstraint):
        eval_volume(*pts, 1 / 6)


# -- shape matching -----------------------------------------------------------------


def test_shape_match_translation():
    rest = UNIT_TET
    res = solve_shape_match(rest, rest + (1, 2, 3))
    np.testing.assert_allclose(res.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(res.corrections, 0, atol=1e-12)


def test_shape_match_rotation():
    R = Rotation.from_euler("z", 90, degrees=True).as_matrix()
    res = solve_shape_match(UNIT_TET, UNIT_TET @ R.T)
    assert np.linalg.norm(res.rotation - R) < 1e-6
    np.testing.assert_allclose(res.corrections, 0, atol=1e-12)


def _procrustes_residual(rest, cur):
    # independent Kabsch oracle via the quaternion eigenvalue formulation
    a = rest - rest.mean(0)
    b = cur - cur.mean(0)
    S = a.T @ b
    Sxx, Sxy, Sxz, Syx, Syy, Syz, Szx, Szy, Szz = S.ravel()
    N = np.array([
        [Sxx + Syy + Szz, Syz - Szy, Szx - Sxz, Sxy - Syx],
        [Syz - Szy, Sxx - Syy - Szz, Sxy + Syx, Szx + Sxz],
        [Szx - Sxz, Sxy + Syx, -Sxx + Syy - Szz, Syz + Szy],
        [Sxy - Syx, Szx + Sxz, Syz + Szy, -Sxx - Syy + Szz],
    ])
    lam = np.linalg.eigvalsh(N)[-1]
    return (a**2).sum() + (b**2).sum() - 2 * lam


def test_shape_match_least_squares_residual(rng):
    rest = rng.normal(size=(8, 3))
    R = Rotation.random(random_state=3).as_matrix()
    cur = rest @ R.T + (0.3, -1, 2) + 0.05 * rng.normal(size=rest.shape)
    res = solve_shape_match(rest, cur)
    assert (res.corrections**2).sum() == pytest.approx(_procrustes_residual(rest, cur), abs=1e-8)


def test_shape_match_collinear():
    line = np.outer(np.arange(4.0), [1, 0, 0])
    with pytest.raises(DegenerateCluster):
        solve_shape_match(line, line)


@given(st.integers(0, 10_000), st.integers(0, 10_000))
def test_shape_match_rigid_equivariance(seed, rot_seed):
    g = np.random.default_rng(seed)
    rest = g.normal(size=(5, 3))
    cur = rest + 0.2 * g.normal(size=rest.shape)
    Q = Rotation.random(random_state=rot_seed).as_matrix()
    t = g.normal(size=3)
    a = solve_shape_match(rest, cur)
    b = solve_shape_match(rest @ Q.T + t, cur @ Q.T + t)
    np.testing.assert_allclose(np.linalg.norm(a.corrections, axis=1), np.linalg.norm(b.corrections, axis=1), atol=1e-9)
    assert np.linalg.det(b.rotation) == pytest.approx(1.0, abs=1e-9)


# -- system and step ---------------------------------------------------------------------


def test_particle_system_invariants():
    with pytest.raises(ValidationError):
        ParticleSystem(np.zeros((2, 3)), np.zeros((3, 3)), np.ones(2), [])
    with pytest.raises(ValidationError):
        ParticleSystem.at_rest(np.zeros((2, 3)), surface_indices=[0, 0])
    with pytest.raises(ValidationError):
        ParticleSystem.at_rest(np.zeros((2, 3)), surface_indices=[2])
    with pytest.raises(ValidationError):
        ParticleSystem.at_rest(np.zeros((2, 3)), [1.0, -1.0])
    with pytest.raises(ValidationError):
        ParticleSystem.at_rest(np.zeros((2, 3)), dt=0.0)
    with pytest.raises(ValidationError):
        ParticleSystem.at_rest(np.zeros((2, 3)), damping=1.5)


def test_constraint_invariants():
    with pytest.raises(ValidationError):
        ConstraintSet.from_constraints([Distance(0, 1, 0.0)])
    with pytest.raises(ValidationError):
        ConstraintSet.from_constraints([Distance(0, 1, 1.0, stiffness=1.5)])
    with pytest.raises(ValidationError):
        ConstraintSet.from_constraints([ShapeMatch((0, 1), np.zeros((2, 3)))])
    sys = ParticleSystem.at_rest(np.zeros((2, 3)))
    with pytest.raises(ValidationError):
        simulate_step(sys, [Distance(0, 5, 1.0)])


def test_free_fall_single_particle():
    sys = ParticleSystem.at_rest(np.zeros((1, 3)), damping=1.0)
    out = simulate_step(sys, [])
    np.testing.assert_allclose(out.positions[0], [0, 0, -9.81e-4], rtol=1e-12)
    np.testing.assert_allclose(out.velocities[0], [0, 0, -0.0981], rtol=1e-12)


def test_fixed_particle_under_gravity():
    sys = ParticleSystem.at_rest(np.ones((1, 3)), [0.0])
    out = simulate_step(sys, [])
    assert np.array_equal(out.positions, sys.positions)
    assert np.array_equal(out.velocities, np.zeros((1, 3)))


def test_two_particle_chain_monotone():
    x = np.array([[0, 0, 0], [2, 0, 0]], dtype=float)
    sys = ParticleSystem.at_rest(x, external_accel=(0, 0, 0))
    stats = StepStats()
    out = simulate_step(sys, [Distance(0, 1, 1.0)], SolverConfig(10, record_residuals=True), stats)
    r = np.array(stats.distance_residuals)
    assert r[-1] < 1.0
    assert np.all(np.diff(r) <= 0)
    # closed form: one stiffness-1 projection satisfies a single constraint exactly
    assert r[0] == pytest.approx(0.0, abs=1e-15)
    np.testing.assert_allclose(out.positions, [[0.5, 0, 0], [1.5, 0, 0]])


def test_partial_stiffness_geometric_decay():
    x = np.array([[0, 0, 0], [2, 0, 0]], dtype=float)
    sys = ParticleSystem.at_rest(x, external_accel=(0, 0, 0))
    stats = StepStats()
    simulate_step(sys, [Distance(0, 1, 1.0, stiffness=0.5)], SolverConfig(5, record_residuals=True), stats)
    # each sweep removes half the remaining residual
    np.testing.assert_allclose(stats.distance_residuals, 0.5 ** np.arange(1, 6), rtol=1e-12)


def test_grasp_places_particles():
    x = np.array([[0, 0, 0], [1, 0, 0]], dtype=float)
    sys = ParticleSystem.at_rest(x)
    target = np.array([[0, 0, 0.5]])
    out = simulate_step(sys, [Grasp(np.array([0]), target), Distance(0, 1, 1.0)])
    np.testing.assert_array_equal(out.positions[0], target[0])
    assert np.linalg.norm(out.positions[1] - out.positions[0]) == pytest.approx(1.0, abs=1e-9)


def test_registration_constraint_descends():
    # J = |x - c|^2 / 2 per particle has gradient x - c
    c = np.array([[1.0, 2.0, 3.0]])
    reg = Registration(lambda x: x - c, 0.5)
    sys = ParticleSystem.at_rest(np.zeros((1, 3)), external_accel=(0, 0, 0))
    out = simulate_step(sys, [reg], SolverConfig(3))
    np.testing.assert_allclose(out.positions, c * (1 - 0.5**3))


def test_registration_correction_masks():
    g = np.ones((3, 3))
    corr = registration_correction(np.array([1.0, 0.0, 1.0]), g, 0.3, exempt=[2])
    np.testing.assert_array_equal(corr, [[-0.3] * 3, [0] * 3, [0] * 3])


def test_non_finite_state():
    reg = Registration(lambda x: np.full_like(x, np.inf), 1.0)
    sys = ParticleSystem.at_rest(np.zeros((1, 3)))
    with pytest.raises(NonFiniteState):
        simulate_step(sys, [reg])


def test_degenerate_events_counted():
    sys = ParticleSystem.at_rest(np.zeros((2, 3)), external_accel=(0, 0, 0))
    stats = StepStats()
    out = simulate_step(sys, [Distance(0, 1, 1.0)], SolverConfig(3), stats)
    assert stats.degenerate_events == 3
    assert np.all(out.positions == 0)


def test_convergence_tolerance_early_exit():
    sys = ParticleSystem.at_rest(np.array([[0, 0, 0], [2, 0, 0.0]]), external_accel=(0, 0, 0))
    stats = StepStats()
    simulate_step(sys, [Distance(0, 1, 1.0)], SolverConfig(50, convergence_tolerance=1e-12), stats)
    assert stats.sweeps == 2


def test_from_tets_counts():
    x = np.vstack([UNIT_TET, [1, 1, 1]])
    tets = np.array([[0, 1, 2, 3], [1, 2, 3, 4]])
    cs = ConstraintSet.from_tets(x, tets)
    assert len(cs.distance_pairs) == 9
    assert len(cs.volume_tets) == 2
    assert cs.n_clusters == 2
    soft = ConstraintSet.from_tets(x, tets, 1.0, 0.0, 0.0)
    assert len(soft.volume_tets) == 0 and soft.n_clusters == 0


def _random_body(seed):
    g = np.random.default_rng(seed)
    x = np.vstack([UNIT_TET, UNIT_TET + (1.0, 0, 0)]) + 0.05 * g.normal(size=(8, 3))
    tets = np.array([[0, 1, 2, 3], [4, 5, 6, 7], [1, 5, 2, 3]])
    w = g.choice([0.0, 1.0, 2.0], size=8)
    rest = np.vstack([UNIT_TET, UNIT_TET + (1.0, 0, 0)])
    cs = ConstraintSet.from_tets(rest, tets, *g.uniform(0.1, 1, size=3))
    sys = ParticleSystem(x, g.normal(size=(8, 3)), w, [])
    return sys, cs


@given(st.integers(0, 100_000))
def test_fixed_particles_never_move(seed):
    sys, cs = _random_body(seed)
    out = simulate_step(sys, cs, SolverConfig(5))
    fixed = sys.inverse_masses == 0
    assert np.array_equal(out.positions[fixed], sys.positions[fixed])


@given(st.integers(0, 100_000))
def test_velocity_consistency(seed):
    sys, cs = _random_body(seed)
    out = simulate_step(sys, cs, SolverConfig(5))
    np.testing.assert_allclose(out.velocities * sys.dt, out.positions - sys.positions, rtol=1e-12, atol=1e-15)


@given(st.integers(0, 100_000))
def test_rest_fixed_point(seed):
    g = np.random.default_rng(seed)
    x = np.vstack([UNIT_TET, UNIT_TET + (1.0, 0, 0)]) + 0.1 * g.normal(size=(8, 3))
    tets = np.array([[0, 1, 2, 3], [4, 5, 6, 7]])
    cs = ConstraintSet.from_tets(x, tets)
    sys = ParticleSystem.at_rest(x, external_accel=(0, 0, 0))
    out = simulate_step(sys, cs)
    np.testing.assert_allclose(out.positions, x, atol=1e-12)


@given(vec3, vec3, st.floats(0.1, 3))
def test_single_distance_monotone(a, b, d0):
    if np.linalg.norm(a - b) < 1e-3:
        return
    sys = ParticleSystem.at_rest(np.array([a, b]), external_accel=(0, 0, 0))
    stats = StepStats()
    simulate_step(sys, [Distance(0, 1, d0)], SolverConfig(6, record_residuals=True), stats)
    r = np.array(stats.distance_residuals)
    assert np.all(np.diff(r) <= 1e-12)


@given(st.integers(0, 100_000))
def test_single_volume_monotone(seed):
    g = np.random.default_rng(seed)
    x = UNIT_TET + 0.2 * g.normal(size=(4, 3))
    sys = ParticleSystem.at_rest(x, external_accel=(0, 0, 0))
    stats = StepStats()
    simulate_step(sys, [Volume(0, 1, 2, 3, 1 / 6)], SolverConfig(8, record_residuals=True), stats)
    r = np.array(stats.volume_residuals)
    r0 = abs(eval_volume(*x, 1 / 6)[0])
    assert np.all(np.diff(np.concatenate([[r0], r])) <= 1e-12)
