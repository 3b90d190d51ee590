"""Vectorized jump-tracking environment for policy training and evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .reference import Phase, ReferenceMotion
from .rewards import TERM_NAMES, RewardConfig, compute_reward
from .robot_model import RobotMorphology
from .simulator import (
    PdParams,
    SimParams,
    SimState,
    Terrain,
    base_collision,
    diverged,
    homing_state,
    rotate_inverse,
    step_batch,
)

OBS_DIM = 55
ACT_DIM = 12


@dataclass(frozen=True)
class NoiseConfig:
    ang_vel: float = 0.2
    gravity: float = 0.05
    joint_pos: float = 0.01
    joint_vel: float = 1.5

    def scales(self) -> np.ndarray:
        """Per-channel uniform noise half-widths for the 55-entry observation."""
        s = np.zeros(OBS_DIM)
        s[0:3] = self.ang_vel
        s[3:6] = self.gravity
        s[6:18] = self.joint_pos
        s[18:30] = self.joint_vel
        return s


@dataclass(frozen=True)
class RandomizationConfig:
    friction_range: tuple = (0.4, 1.0)
    spawn_offset: float = 0.5
    noise: NoiseConfig = field(default_factory=NoiseConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "RandomizationConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise KeyError(f"unknown randomization keys: {sorted(unknown)}")
        noise = NoiseConfig(**d.pop("noise", {}))
        if "friction_range" in d:
            d["friction_range"] = tuple(d["friction_range"])
        return cls(noise=noise, **d)


def projected_gravity(quat) -> np.ndarray:
    return rotate_inverse(quat, np.array([0.0, 0.0, -1.0]))


def build_observation(state: SimState, desired_joints, trigger, prev_action, noise_scales=None, rng=None) -> np.ndarray:
    """Observation vector(s) of length 55.

    Order: base angular velocity, projected gravity, joint positions, joint
    velocities, previous action, desired joint positions, trigger bit. Noise
    is added only when ``noise_scales`` and ``rng`` are both given.
    """
    parts = [
        state.base_ang_vel,
        projected_gravity(state.base_orientation),
        state.joint_positions,
        state.joint_velocities,
        np.asarray(prev_action, dtype=float),
        np.asarray(desired_joints, dtype=float),
        np.asarray(trigger, dtype=float)[..., None],
    ]
    shape = np.broadcast_shapes(*(np.shape(p)[:-1] for p in parts))
    obs = np.concatenate([np.broadcast_to(p, shape + p.shape[-1:]) for p in parts], axis=-1)
    if noise_scales is not None and rng is not None:
        obs = obs + noise_scales * rng.uniform(-1.0, 1.0, size=obs.shape)
    return obs


def action_to_targets(action, morph: RobotMorphology, scale: float = 0.5) -> np.ndarray:
    return np.clip(morph.homing_joints + scale * np.asarray(action, dtype=float), morph.joint_lower, morph.joint_upper)


@dataclass
class StepResult:
    obs: np.ndarray
    reward: np.ndarray
    done: np.ndarray
    timeout: np.ndarray
    terms: dict
    info: dict


class JumpEnv:
    """Batch of independent jump episodes sharing one terrain and one reference.

    ``spawn_sampler(rng, n)`` returns (n, 2) spawn points; by default spawns
    land within ``spawn_offset`` of the origin.
    """

    def __init__(
        self,
        motion: ReferenceMotion,
        terrain: Terrain,
        num_envs: int,
        morph: RobotMorphology = RobotMorphology(),
        pd: PdParams = PdParams(),
        sim: SimParams = SimParams(),
        reward_cfg: RewardConfig = RewardConfig(),
        randomization: RandomizationConfig = RandomizationConfig(),
        max_episode_s: float = 3.0,
        action_scale: float = 0.5,
        training: bool = True,
        seed: int = 0,
        spawn_sampler=None,
    ):
        self.motion = motion
        self.terrain = terrain
        self.n = num_envs
        self.morph = morph
        self.pd = pd
        self.sim = sim
        self.reward_cfg = reward_cfg
        self.rand = randomization
        self.action_scale = action_scale
        self.training = training
        self.rng = np.random.default_rng(seed)
        self.policy_dt = sim.dt * sim.decimation
        self.max_steps = min(len(motion), int(round(max_episode_s / self.policy_dt)))
        self.spawn_sampler = spawn_sampler or self._default_spawn
        self.noise_scales = randomization.noise.scales()
        self.state = homing_state(morph, batch=num_envs)
        self.step_count = np.zeros(num_envs, dtype=int)
        self.spawn = np.zeros((num_envs, 3))
        self.mu = np.ones(num_envs)
        self.prev_actions = np.zeros((num_envs, ACT_DIM))
        self.prev_prev_actions = np.zeros((num_envs, ACT_DIM))
        self.sat_run = np.zeros(num_envs, dtype=int)
        self.sat_run_max = np.zeros(num_envs, dtype=int)
        self.reset(np.ones(num_envs, bool))

    def _default_spawn(self, rng, n):
        return rng.uniform(-self.rand.spawn_offset, self.rand.spawn_offset, size=(n, 2))

    def reset(self, mask) -> None:
        idx = np.flatnonzero(mask)
        if idx.size == 0:
            return
        xy = np.asarray(self.spawn_sampler(self.rng, idx.size), dtype=float)
        ground = self.terrain.height_at(xy[:, 0], xy[:, 1])
        self.spawn[idx] = np.column_stack([xy, ground])
        lo, hi = self.rand.friction_range
        self.mu[idx] = self.rng.uniform(lo, hi, size=idx.size)
        fresh = homing_state(self.morph, batch=idx.size, xy=xy)
        fresh.base_position[:, 2] += ground
        full = self.state.copy()
        for name in ("base_position", "base_orientation", "base_lin_vel", "base_ang_vel", "joint_positions",
                     "joint_velocities", "foot_contact", "time", "contact_anchor", "joint_torques", "contact_forces"):
            getattr(full, name)[idx] = getattr(fresh, name)
        self.state = full
        self.step_count[idx] = 0
        self.prev_actions[idx] = 0.0
        self.prev_prev_actions[idx] = 0.0
        self.sat_run[idx] = 0
        self.sat_run_max[idx] = 0

    def observe(self) -> np.ndarray:
        k = np.minimum(self.step_count, len(self.motion) - 1)
        trigger = (k >= self.motion.trigger_step).astype(float)
        noise = (self.noise_scales, self.rng) if self.training else (None, None)
        return build_observation(self.state, self.motion.joint_positions[k], trigger, self.prev_actions, *noise)

    def step(self, actions) -> StepResult:
        actions = np.asarray(actions, dtype=float)
        targets = action_to_targets(actions, self.morph, self.action_scale)
        s = self.state
        airborne = np.zeros(self.n, dtype=int)
        bad = np.zeros(self.n, bool)
        with np.errstate(all="ignore"):
            for _ in range(self.sim.decimation):
                s = step_batch(s, targets, self.pd, self.terrain, self.morph, self.sim, mu=self.mu)
                airborne += ~s.foot_contact.any(axis=-1)
                saturated = np.any(np.abs(s.joint_torques) >= self.morph.torque_limit - 1e-9, axis=-1)
                self.sat_run = np.where(saturated, self.sat_run + 1, 0)
                self.sat_run_max = np.maximum(self.sat_run_max, self.sat_run)
                bad |= diverged(s)
        if bad.any():
            # keep NaNs out of the batch; these episodes end now
            fresh = homing_state(self.morph, batch=self.n)
            s.assign(bad, fresh)
        self.state = s
        k = np.minimum(self.step_count, len(self.motion) - 1)
        ref_pos = self.motion.base_position[k] + self.spawn
        collision = base_collision(s, self.terrain, self.morph) & ~bad
        rb = compute_reward(
            s.base_position, s.base_orientation, s.joint_positions,
            ref_pos, self.motion.base_orientation[k], self.motion.joint_positions[k],
            actions, self.prev_actions, self.prev_prev_actions,
            s.joint_torques, s.joint_velocities, self.motion.phases[k], collision, self.reward_cfg,
        )
        terms = {name: np.where(bad, 0.0, rb.terms[name]) for name in TERM_NAMES}
        reward = sum(terms.values())
        self.prev_prev_actions = self.prev_actions
        self.prev_actions = actions.copy()
        self.step_count += 1
        timeout = (self.step_count >= self.max_steps) & ~collision & ~bad
        done = collision | bad | timeout
        info = {
            "phase": self.motion.phases[k].copy(),
            "collision": collision,
            "diverged": bad,
            "airborne_ticks": airborne,
            "max_saturation_s": self.sat_run_max * self.sim.dt,
            "episode_steps": self.step_count.copy(),
        }
        self.reset(done)
        return StepResult(self.observe(), reward, done, timeout, terms, info)


def landing_zone_spawn(motion: ReferenceMotion, platform_size: float, margin: float = 0.05, lateral: float = 1.5):
    """Spawn sampler that puts the nominal landing zone just past the platform's +x edge.

    The robot stands on the flat platform and lands among the obstacles.
    """
    dx = float(motion.base_position[-1, 0] - motion.base_position[0, 0])
    edge = 0.5 * platform_size

    def sample(rng, n):
        x = rng.uniform(edge - dx + margin, edge - 0.3, size=n) if dx > 0.35 + margin else np.full(n, edge - 0.3)
        y = rng.uniform(-lateral, lateral, size=n)
        return np.column_stack([x, y])

    return sample
