import numpy as np
import pytest

from jumpland.env import (
    ACT_DIM,
    OBS_DIM,
    JumpEnv,
    NoiseConfig,
    RandomizationConfig,
    action_to_targets,
    build_observation,
    landing_zone_spawn,
    projected_gravity,
)
from jumpland.robot_model import RobotMorphology
from jumpland.simulator import Terrain, homing_state, quat_from_rotvec

MORPH = RobotMorphology()


def test_observation_layout():
    s = homing_state(MORPH)
    obs = build_observation(s, MORPH.homing_joints, 0.0, np.zeros(12))
    assert obs.shape == (OBS_DIM,) == (3 + 3 + 12 + 12 + 12 + 12 + 1,)
    np.testing.assert_array_equal(obs[3:6], [0, 0, -1])
    np.testing.assert_array_equal(obs[6:18], MORPH.homing_joints)
    np.testing.assert_array_equal(obs[42:54], MORPH.homing_joints)
    assert obs[54] == 0.0


def test_projected_gravity_of_pitched_body():
    g = projected_gravity(quat_from_rotvec(np.array([0.0, np.pi / 2, 0.0])))
    np.testing.assert_allclose(g, [1.0, 0.0, 0.0], atol=1e-12)


def test_noise_touches_only_proprioception(rng):
    s = homing_state(MORPH, batch=64)
    clean = build_observation(s, MORPH.homing_joints, 1.0, np.zeros(12))
    noisy = build_observation(s, MORPH.homing_joints, 1.0, np.zeros(12), NoiseConfig().scales(), rng)
    diff = np.abs(noisy - clean)
    assert np.all(diff[:, 30:] == 0.0)
    scales = NoiseConfig().scales()[:30]
    assert np.all(diff[:, :30] <= scales)
    assert np.all(diff[:, :30].max(axis=0) > 0.5 * scales)


def test_action_mapping():
    np.testing.assert_array_equal(action_to_targets(np.zeros(12), MORPH), MORPH.homing_joints)
    a = np.zeros(12)
    a[4] = 1.0
    t = action_to_targets(a, MORPH, 0.5)
    assert t[4] == pytest.approx(MORPH.homing_joints[4] + 0.5)
    np.testing.assert_array_equal(np.delete(t, 4), np.delete(MORPH.homing_joints, 4))
    big = action_to_targets(np.full(12, 50.0), MORPH)
    np.testing.assert_array_equal(big, MORPH.joint_upper)


@pytest.fixture
def env(plan08):
    _, _, motion = plan08
    return JumpEnv(motion, Terrain.flat(), 8, seed=3)


def test_trigger_bit_follows_reference(env):
    obs = env.observe()
    assert np.all(obs[:, 54] == 0.0)
    zero = np.zeros((8, ACT_DIM))
    for _ in range(env.motion.trigger_step):
        res = env.step(zero)
    live = ~res.done
    assert np.all(res.obs[live, 54] == 1.0)


def test_friction_and_spawn_ranges(env):
    assert np.all((env.mu >= 0.4) & (env.mu <= 1.0))
    assert np.all(np.abs(env.spawn[:, :2]) <= 0.5)
    np.testing.assert_allclose(env.state.base_position[:, :2], env.spawn[:, :2])


def test_episode_timeout_and_reset(plan08):
    _, _, motion = plan08
    env = JumpEnv(motion, Terrain.flat(), 4, max_episode_s=0.2, seed=0)
    assert env.max_steps == 10
    for k in range(10):
        res = env.step(np.zeros((4, ACT_DIM)))
    assert np.all(res.timeout) and np.all(res.done)
    np.testing.assert_array_equal(res.info["episode_steps"], 10)
    assert np.all(env.step_count == 0)


def test_first_step_reward_is_high_when_standing(env):
    res = env.step(np.zeros((8, ACT_DIM)))
    assert np.all(res.reward > 6.0)
    assert np.all(res.reward <= 9.0)
    np.testing.assert_allclose(res.reward, sum(res.terms.values()))


def test_deterministic_per_seed(plan08, rng):
    _, _, motion = plan08
    acts = rng.normal(0, 0.5, (20, 4, ACT_DIM))
    runs = []
    for _ in range(2):
        e = JumpEnv(motion, Terrain.flat(), 4, seed=11)
        runs.append(np.stack([e.step(a).obs for a in acts]))
    assert runs[0].tobytes() == runs[1].tobytes()


def test_eval_mode_has_no_noise(plan08):
    _, _, motion = plan08
    e = JumpEnv(motion, Terrain.flat(), 2, training=False, seed=0)
    np.testing.assert_array_equal(e.observe()[:, 3:6], np.tile([0, 0, -1.0], (2, 1)))


def test_landing_zone_spawn(plan08):
    _, _, motion = plan08
    sample = landing_zone_spawn(motion, 5.0)
    xy = sample(np.random.default_rng(0), 500)
    dx = motion.base_position[-1, 0] - motion.base_position[0, 0]
    landing = xy[:, 0] + dx
    assert np.all(xy[:, 0] <= 2.5 - 0.3)  # take-off on the platform
    assert np.all(landing >= 2.5 + 0.05)  # landing beyond its edge
    assert np.all(np.abs(xy[:, 1]) <= 1.5)


def test_randomization_from_dict():
    r = RandomizationConfig.from_dict({"friction_range": [0.5, 0.9], "noise": {"joint_vel": 1.0}})
    assert r.friction_range == (0.5, 0.9) and r.noise.joint_vel == 1.0
    with pytest.raises(KeyError):
        RandomizationConfig.from_dict({"gravity": 1})
