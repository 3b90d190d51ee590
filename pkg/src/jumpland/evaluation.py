"""Landing evaluation on plank obstacles with S / WS / F scoring."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .env import JumpEnv, RandomizationConfig
from .reference import ReferenceMotion
from .rewards import RewardConfig
from .robot_model import LEG_NAMES, RobotMorphology, feet_fk
from .simulator import PdParams, SimParams, Terrain, quat_to_rot

SCENARIOS = {
    "flat": (),
    "front": ("FL", "FR"),
    "hind": ("HL", "HR"),
    "right": ("FR", "HR"),
    "HR": ("HR",),
    "FL": ("FL",),
}
OBSTACLE_SCENARIOS = ("front", "hind", "right", "HR", "FL")
HEIGHTS = (0.05, 0.10, 0.13, 0.16)
SCORES = {"S": 1.0, "WS": 0.8, "F": 0.0}

PLANK_SIZE = 0.5
STABLE_ANG_VEL = 0.5
STABILIZE_WINDOW = 1.0
SATURATION_LIMIT = 0.2
FOOT_SHIFT_LIMIT = 0.05
MIN_FLIGHT_S = 0.05  # settling ticks at spawn are not a jump


class UnknownScenario(ValueError):
    pass


@dataclass
class EpisodeOutcome:
    outcome: str
    touchdown_time: float
    reason: str
    orientation_reward: float
    friction: float

    @property
    def score(self) -> float:
        return SCORES[self.outcome]


@dataclass
class EvalReport:
    scenario: str
    height: float
    obstacle_feet: tuple
    planks: np.ndarray  # (k, 5): cx, cy, sx, sy, h
    episodes: list = field(default_factory=list)

    @property
    def scores(self) -> np.ndarray:
        return np.array([e.score for e in self.episodes])

    @property
    def success_rate(self) -> float:
        return float(np.mean(self.scores)) if self.episodes else float("nan")

    @property
    def orientation_reward(self) -> float:
        """Mean base orientation reward over the 1 s after planned touch-down."""
        vals = [e.orientation_reward for e in self.episodes]
        return float(np.mean(vals)) if vals else float("nan")

    def counts(self) -> dict:
        return {k: sum(e.outcome == k for e in self.episodes) for k in SCORES}

    def write_csv(self, path, config_hash: str = "", seed: int = 0) -> None:
        buf = io.StringIO()
        for k, v in {"config_hash": config_hash, "seed": seed, "scenario": self.scenario,
                     "height": repr(self.height), "obstacle_feet": " ".join(self.obstacle_feet),
                     "planks": " ".join(repr(float(x)) for x in self.planks.ravel()),
                     "success_rate": repr(self.success_rate)}.items():
            buf.write(f"# {k}={v}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["episode", "outcome", "score", "touchdown_time", "orientation_reward", "friction", "reason"])
        for i, e in enumerate(self.episodes):
            w.writerow([i, e.outcome, e.score, repr(e.touchdown_time), repr(e.orientation_reward),
                        repr(e.friction), e.reason])
        Path(path).write_text(buf.getvalue())


def classify_episode(failure: str, touched_down: bool, stable: bool, foot_shift) -> tuple[str, str]:
    """Score one episode.

    ``foot_shift`` holds, per obstacle foot, the distance between the first
    touch-down point and the foot position at the end of the stabilizing
    window (NaN when the foot never touched).
    """
    shift = np.asarray(foot_shift, dtype=float)
    if failure:
        return "F", failure
    if not touched_down:
        return "F", "no flight phase"
    if not stable:
        return "F", "not stabilized within 1 s"
    if np.any(np.isnan(shift)):
        return "WS", "obstacle foot missing at window end"
    if np.all(shift <= FOOT_SHIFT_LIMIT):
        return "S", ""
    return "WS", f"foot shift {float(np.max(shift)):.3f} m"


def nominal_landing_feet(motion: ReferenceMotion, morph: RobotMorphology) -> np.ndarray:
    """(4, 2) world xy of the planned landing footholds for a spawn at the origin."""
    feet = feet_fk(motion.joint_positions[-1], morph)
    return motion.base_position[-1, :2] + feet[:, :2]


def scenario_terrain(scenario: str, height: float, motion: ReferenceMotion, morph: RobotMorphology,
                     size: float = 12.0, cell_size: float = 0.02) -> tuple[Terrain, tuple]:
    if scenario not in SCENARIOS:
        raise UnknownScenario(f"unknown scenario {scenario!r}; choose from {', '.join(SCENARIOS)}")
    terrain = Terrain.flat(size, cell_size)
    feet = nominal_landing_feet(motion, morph)
    names = SCENARIOS[scenario]
    for name in names:
        terrain.add_box(feet[LEG_NAMES.index(name)], (PLANK_SIZE, PLANK_SIZE), height)
    return terrain, names


def evaluate_policy(
    policy,
    motion: ReferenceMotion,
    scenario: str,
    height: float,
    episodes: int = 50,
    seed: int = 0,
    morph: RobotMorphology = RobotMorphology(),
    pd: PdParams = PdParams(),
    sim: SimParams = SimParams(),
    reward_cfg: RewardConfig = RewardConfig(),
    randomization: RandomizationConfig = RandomizationConfig(),
    spawn_jitter: float = 0.02,
    action_scale: float = 0.5,
) -> EvalReport:
    """Run ``episodes`` deterministic-policy episodes in parallel and score them.

    ``policy(obs) -> actions`` works on (B, 55) batches. Friction is drawn per
    episode from the randomization range and the spawn point is jittered, both
    from ``seed``, so two policies evaluated with one seed see identical
    episode conditions.
    """
    terrain, names = scenario_terrain(scenario, height, motion, morph)
    env = JumpEnv(
        motion, terrain, episodes, morph=morph, pd=pd, sim=sim, reward_cfg=reward_cfg,
        randomization=randomization, max_episode_s=len(motion) * sim.dt * sim.decimation,
        action_scale=action_scale, training=False, seed=seed,
        spawn_sampler=lambda rng, n: rng.uniform(-spawn_jitter, spawn_jitter, size=(n, 2)),
    )
    mu = env.mu.copy()
    legs = [LEG_NAMES.index(n) for n in names]
    T = env.max_steps
    dt = env.policy_dt
    B = episodes
    alive = np.ones(B, bool)
    failed = np.zeros(B, bool)
    reason = np.array([""] * B, dtype=object)
    airborne_seen = np.zeros(B, bool)
    air_ticks = np.zeros(B, int)
    min_ticks = int(round(MIN_FLIGHT_S / sim.dt))
    td_step = np.full(B, -1)
    first_touch = np.full((B, 4, 2), np.nan)
    feet_end = np.full((B, 4, 2), np.nan)
    stable = np.zeros(B, bool)
    # orientation reward over the planned landing window; ended episodes score 0
    rot_sum = np.zeros(B)
    rot_steps = int(round(STABILIZE_WINDOW / dt))

    obs = env.observe()
    for k in range(T):
        res = env.step(policy(obs))
        obs = res.obs
        s = env.state
        # finished episodes were already reset by the env; only info[] describes them
        done_now = res.done & alive
        coll = res.info["collision"] & alive
        div = res.info["diverged"] & alive
        sat = (res.info["max_saturation_s"] > SATURATION_LIMIT) & alive & ~failed
        for mask, why in ((coll, "base collision"), (div, "diverged"), (sat, "torque saturation")):
            new = mask & ~failed
            reason[new] = why
            failed |= new
        live = alive & ~res.done
        contact = s.foot_contact
        if k >= motion.trigger_step:
            air_ticks += np.where(live, res.info["airborne_ticks"], 0)
        airborne_seen |= live & (air_ticks >= min_ticks)
        landed = live & airborne_seen & (td_step < 0) & contact.any(axis=-1)
        td_step[landed] = k
        R = quat_to_rot(s.base_orientation)
        fw = s.base_position[:, None, :2] + np.einsum("bij,bfj->bfi", R, feet_fk(s.joint_positions, morph))[..., :2]
        touch_new = live[:, None] & (td_step >= 0)[:, None] & contact & np.isnan(first_touch[..., 0])
        first_touch[touch_new] = fw[touch_new]
        in_window = live & (td_step >= 0) & (k > td_step) & ((k - td_step) * dt <= STABILIZE_WINDOW + 1e-9)
        stable |= in_window & (np.linalg.norm(s.base_ang_vel, axis=-1) < STABLE_ANG_VEL)
        if 0 <= k - motion.touchdown_step < rot_steps:
            rot_sum[alive] += res.terms["base_rot"][alive]
        window_end = live & (td_step >= 0) & np.isclose((k - td_step) * dt, STABILIZE_WINDOW)
        feet_end[window_end] = fw[window_end]
        alive &= ~done_now
        if not alive.any():
            break

    report = EvalReport(scenario, float(height), tuple(names), terrain.obstacles.copy())
    for b in range(B):
        w_rot = rot_sum[b] / rot_steps
        td = float(td_step[b] * dt) if td_step[b] >= 0 else float("nan")
        shift = np.linalg.norm(feet_end[b, legs] - first_touch[b, legs], axis=-1)
        outcome, why = classify_episode(reason[b] if failed[b] else "", td_step[b] >= 0, bool(stable[b]), shift)
        report.episodes.append(EpisodeOutcome(outcome, td, why, float(w_rot), float(mu[b])))
    return report


def policy_rollout(model, motion: ReferenceMotion, terrain: Terrain, cfg, spawn=(0.0, 0.0)):
    """One deterministic episode over the full reference, logged like an open-loop rollout.

    Returns (RolloutLog, reward terms). The log stops early if the episode
    terminates.
    """
    from .simulator import RolloutLog

    env = JumpEnv(
        motion, terrain, 1, morph=cfg.morphology, pd=cfg.sim.policy_pd(), sim=cfg.sim.params(),
        reward_cfg=cfg.reward, randomization=cfg.randomization, max_episode_s=motion.duration,
        action_scale=cfg.episode.action_scale, training=False, seed=cfg.seed,
        spawn_sampler=lambda rng, n: np.tile(np.asarray(spawn, dtype=float), (n, 1)),
    )
    from .env import action_to_targets

    rec = {k: [] for k in ("pos", "quat", "v", "w", "q", "qd", "tgt", "tau", "contact", "air", "coll", "phase")}
    terms = {}
    obs = env.observe()
    for k in range(env.max_steps):
        act = model.act(obs)
        res = env.step(act)
        for name, v in res.terms.items():
            terms.setdefault(name, []).append(float(v[0]))
        s = env.state if not res.done[0] or res.timeout[0] else None
        if s is None:
            break
        rec["pos"].append(s.base_position[0])
        rec["quat"].append(s.base_orientation[0])
        rec["v"].append(s.base_lin_vel[0])
        rec["w"].append(s.base_ang_vel[0])
        rec["q"].append(s.joint_positions[0])
        rec["qd"].append(s.joint_velocities[0])
        rec["tgt"].append(action_to_targets(act[0], cfg.morphology, cfg.episode.action_scale))
        rec["tau"].append(s.joint_torques[0])
        rec["contact"].append(s.foot_contact[0])
        rec["air"].append(int(res.info["airborne_ticks"][0]))
        rec["coll"].append(bool(res.info["collision"][0]))
        rec["phase"].append(int(res.info["phase"][0]))
        obs = res.obs
    n = len(rec["pos"])
    terms = {k: np.array(v[:n]) for k, v in terms.items()}
    rlog = RolloutLog(
        dt=env.policy_dt,
        time=env.policy_dt * np.arange(1, n + 1),
        phase=np.array(rec["phase"]),
        base_position=np.array(rec["pos"]),
        base_orientation=np.array(rec["quat"]),
        base_lin_vel=np.array(rec["v"]),
        base_ang_vel=np.array(rec["w"]),
        joint_positions=np.array(rec["q"]),
        joint_velocities=np.array(rec["qd"]),
        joint_targets=np.array(rec["tgt"]),
        joint_torques=np.array(rec["tau"]),
        foot_contact=np.array(rec["contact"]),
        airborne_ticks=np.array(rec["air"]),
        collision=np.array(rec["coll"]),
    )
    return rlog, terms
