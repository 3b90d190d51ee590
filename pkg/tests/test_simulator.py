import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jumpland.jump_to import JumpCommand, reshape_flight_joints, solve_jump
from jumpland.reference import resample
from jumpland.robot_model import RobotMorphology
from jumpland.simulator import (
    ContactParams,
    NumericalDivergence,
    PdParams,
    SimParams,
    Terrain,
    TerrainParams,
    base_collision,
    contact_force,
    flight_overlap,
    generate_terrain,
    homing_state,
    quat_angle,
    quat_from_rotvec,
    quat_mul,
    quat_to_rot,
    rollout_pd,
    step,
    step_batch,
)

MORPH = RobotMorphology()
FLAT = Terrain.flat()
STIFF = PdParams(300.0, 4.0)
DT = SimParams().dt


def airborne_state(height=2.0, omega=(0.0, 0.0, 0.0), vel=(0.0, 0.0, 0.0)):
    s = homing_state(MORPH)
    s.base_position[2] = height
    s.base_ang_vel[:] = omega
    s.base_lin_vel[:] = vel
    return s


# -- terrain ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def rough():
    return generate_terrain(TerrainParams(), seed=7)


def test_terrain_defaults(rough):
    p = TerrainParams()
    assert float(rough.height_at(0.0, 0.0)) == 0.0
    assert rough.heights.max() <= 0.1
    assert rough.heights.max() > 0.05
    assert len(rough.obstacles) == p.num_obstacles == 1500
    xs = rough.origin[0] + rough.cell_size * np.arange(rough.shape[1])
    inside = np.abs(xs) <= 2.5
    assert np.all(rough.heights[np.ix_(inside, inside)] == 0.0)


def test_terrain_deterministic_per_seed(rough):
    again = generate_terrain(TerrainParams(), seed=7)
    np.testing.assert_array_equal(rough.heights, again.heights)
    other = generate_terrain(TerrainParams(), seed=8)
    assert not np.array_equal(rough.heights, other.heights)


def test_terrain_export_round_trip(tmp_path):
    t = generate_terrain(TerrainParams(terrain_size=6.0, platform_size=2.0, num_obstacles=40), seed=1)
    t.export(tmp_path / "t.txt")
    header = (tmp_path / "t.txt").read_text().splitlines()[0].split()
    assert header == [str(t.shape[1]), str(t.shape[0]), repr(t.cell_size)]
    back = Terrain.load(tmp_path / "t.txt")
    np.testing.assert_array_equal(back.heights, t.heights)
    np.testing.assert_array_equal(back.origin, t.origin)


def test_bilinear_height():
    t = Terrain(np.array([[0.0, 1.0], [2.0, 3.0]]), 1.0)
    assert float(t.height_at(0.5, 0.5)) == pytest.approx(1.5)
    assert float(t.height_at(1.0, 0.0)) == 1.0
    assert float(t.height_at(5.0, -5.0)) == 1.0  # clamped to the nearest edge


def test_terrain_param_validation():
    with pytest.raises(ValueError):
        TerrainParams(platform_size=30.0)
    with pytest.raises(ValueError):
        TerrainParams(min_size=3.0)


# -- contact -----------------------------------------------------------------------


def test_contact_examples():
    assert np.all(contact_force([0, 0, 0.01], [0, 0, 0], FLAT) == 0.0)
    f = contact_force([0, 0, -0.001], [0, 0, 0], FLAT, ContactParams(kn=1e4))
    np.testing.assert_allclose(f, [0, 0, 10.0], atol=1e-9)
    # anchor 2 cm away: 100 N tangential demand against a 50 N normal force
    p = ContactParams(kn=1e4, dn=100.0, kt=5e3)
    f = contact_force([0.02, 0, -0.005], [0, 0, 0], FLAT, p, anchor=[0.0, 0.0], mu=0.6)
    assert f[2] == pytest.approx(50.0)
    assert np.hypot(f[0], f[1]) == pytest.approx(30.0)
    assert f[0] < 0  # pulls back towards the anchor


@settings(max_examples=200, deadline=None)
@given(st.floats(-0.05, 0.05), st.floats(-5, 5), st.floats(-0.1, 0.1), st.floats(-0.1, 0.1), st.floats(0, 1.5))
def test_contact_unilateral_and_inside_cone(z, vz, ax, ay, mu):
    f = contact_force([0, 0, z], [0, 0, vz], FLAT, anchor=[ax, ay], mu=mu)
    assert f[2] >= 0.0
    assert np.hypot(f[0], f[1]) <= mu * f[2] + 1e-9


# -- stepping ----------------------------------------------------------------------


def test_free_fall_one_tick():
    s = airborne_state(vel=(0.3, 0.0, 1.0))
    n = step(s, MORPH.homing_joints, PdParams(0.0, 0.0), FLAT, MORPH)
    assert n.base_lin_vel[2] - s.base_lin_vel[2] == pytest.approx(-9.81 * DT, abs=1e-15)
    assert n.base_position[2] - s.base_position[2] == pytest.approx(1.0 * DT - 0.5 * 9.81 * DT**2, abs=1e-15)
    assert not n.foot_contact.any()


def test_airborne_com_follows_gravity():
    s = airborne_state(height=3.0, vel=(1.0, -0.5, 2.0), omega=(0.5, -0.3, 0.8))
    v0, p0 = s.base_lin_vel.copy(), s.base_position.copy()
    for _ in range(500):
        s = step(s, MORPH.homing_joints, PdParams(0.0, 0.0), FLAT, MORPH, external_torque=np.zeros(12))
    t = 0.5
    np.testing.assert_allclose(s.base_lin_vel, v0 + [0, 0, -9.81 * t], atol=1e-9)
    np.testing.assert_allclose(s.base_position, p0 + v0 * t + [0, 0, -0.5 * 9.81 * t**2], atol=1e-9)


def test_airborne_energy_conserved():
    s = airborne_state(height=10.0, vel=(1.0, 0.5, 3.0), omega=(1.5, -2.0, 1.0))
    e0 = float(s.energy(MORPH))
    for _ in range(1000):
        s = step(s, MORPH.homing_joints, PdParams(0.0, 0.0), FLAT, MORPH, external_torque=np.zeros(12))
    assert not s.foot_contact.any()
    assert abs(float(s.energy(MORPH)) - e0) <= 1e-3 * abs(e0)


def test_static_stand_carries_body_weight():
    s = homing_state(MORPH)
    weight = MORPH.mass * 9.81
    for k in range(1000):
        s = step(s, MORPH.homing_joints, STIFF, FLAT, MORPH)
        if k + 1 in (500, 1000):
            assert s.contact_forces[:, 2].sum() == pytest.approx(weight, rel=0.01)
    assert s.foot_contact.all()
    assert s.base_position[2] == pytest.approx(0.25, abs=0.01)


def test_torque_clamped_at_limit():
    s = homing_state(MORPH)
    target = MORPH.homing_joints + 2.0
    n = step(s, target, STIFF, FLAT, MORPH)
    np.testing.assert_allclose(np.abs(n.joint_torques), MORPH.torque_limit)


def test_divergence_is_reported():
    s = airborne_state()
    s.joint_velocities[:] = np.nan
    with pytest.raises(NumericalDivergence):
        step(s, MORPH.homing_joints, STIFF, FLAT, MORPH)


def random_batch(rng, n=32):
    s = homing_state(MORPH, batch=n, xy=rng.uniform(-1, 1, (n, 2)))
    s.base_position[:, 2] += rng.uniform(-0.01, 0.05, n)
    s.base_orientation[:] = quat_from_rotvec(rng.normal(0, 0.2, (n, 3)))
    s.base_lin_vel[:] = rng.normal(0, 0.5, (n, 3))
    s.base_ang_vel[:] = rng.normal(0, 1.0, (n, 3))
    s.joint_positions += rng.normal(0, 0.2, (n, 12))
    s.joint_velocities[:] = rng.normal(0, 2.0, (n, 12))
    s.foot_contact[:] = rng.random((n, 4)) < 0.5
    return s


def test_compiled_kernel_matches_numpy(rng):
    terrain = generate_terrain(TerrainParams(terrain_size=6.0, platform_size=1.0, num_obstacles=60), seed=3)
    s = random_batch(rng)
    mu = rng.uniform(0.4, 1.0, 32)
    targets = MORPH.homing_joints + rng.normal(0, 0.3, (32, 12))
    a = b = s
    for _ in range(50):
        a = step_batch(a, targets, PdParams(20.0, 0.8), terrain, MORPH, mu=mu, backend="numpy")
        b = step_batch(b, targets, PdParams(20.0, 0.8), terrain, MORPH, mu=mu, backend="compiled")
    for name in ("base_position", "base_orientation", "base_lin_vel", "base_ang_vel", "joint_positions",
                 "joint_velocities", "contact_anchor", "joint_torques", "contact_forces"):
        np.testing.assert_allclose(getattr(a, name), getattr(b, name), rtol=1e-9, atol=1e-9, err_msg=name)
    np.testing.assert_array_equal(a.foot_contact, b.foot_contact)


def test_batch_step_matches_single_env(rng):
    s = random_batch(rng, 4)
    batch = step_batch(s, MORPH.homing_joints, STIFF, FLAT, MORPH, backend="numpy")
    for i in range(4):
        one = step_batch(s.index(i), MORPH.homing_joints, STIFF, FLAT, MORPH)
        np.testing.assert_allclose(batch.base_position[i], one.base_position, atol=1e-14)
        np.testing.assert_allclose(batch.joint_velocities[i], one.joint_velocities, atol=1e-12)


def test_base_collision():
    s = homing_state(MORPH)
    assert not base_collision(s, FLAT, MORPH)
    s.base_position[2] = 0.04
    assert base_collision(s, FLAT, MORPH)
    low = homing_state(MORPH)
    low.base_position[2] = 0.12
    assert not base_collision(low, FLAT, MORPH)
    low.base_orientation[:] = quat_from_rotvec([0.0, 1.2, 0.0])
    assert base_collision(low, FLAT, MORPH)


def test_quaternion_helpers(rng):
    v = rng.normal(size=3)
    q = quat_from_rotvec(v)
    assert quat_angle(q) == pytest.approx(np.linalg.norm(v) % (2 * np.pi), abs=1e-12)
    R = quat_to_rot(q)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(quat_mul(q, [1.0, 0, 0, 0]), q)


# -- open-loop rollouts ----------------------------------------------------------------


@pytest.fixture(scope="module")
def forward_log(plan08):
    _, _, motion = plan08
    return rollout_pd(motion, STIFF, FLAT, MORPH), motion


def test_forward_rollout_flies_during_reference_flight(forward_log):
    log, motion = forward_log
    assert log.airborne_windows
    assert flight_overlap(log, motion) >= 0.8
    t0, t1 = motion.flight_window
    mid = int(round(0.5 * (t0 + t1) / log.dt)) - 1
    assert not log.foot_contact[mid].any()


def test_pre_trigger_height(forward_log):
    log, motion = forward_log
    z = log.base_position[: motion.trigger_step, 2]
    assert np.all(np.abs(z - 0.25) <= 0.02)


def test_rollout_deterministic(plan08, forward_log):
    log, motion = forward_log
    again = rollout_pd(motion, STIFF, FLAT, MORPH)
    for name in ("base_position", "joint_torques", "foot_contact"):
        assert getattr(log, name).tobytes() == getattr(again, name).tobytes()


def test_in_place_hop_stays_near_start(cfg):
    cmd = JumpCommand([0.0, 0.0, 0.0])
    knots = solve_jump(cmd, MORPH)
    motion = resample(knots, reshape_flight_joints(knots, cmd, MORPH), 0.02)
    log = rollout_pd(motion, STIFF, FLAT, MORPH)
    assert np.linalg.norm(log.base_position[-1, :2]) <= 0.15
