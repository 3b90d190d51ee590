"""Motion-imitation reward with landing-phase relaxation of joint tracking."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .reference import Phase
from .simulator import quat_angle, quat_conj, quat_mul

TERM_NAMES = (
    "base_pos", "base_rot", "joint", "action_rate", "smoothness", "power", "torque", "base_collision",
)


@dataclass(frozen=True)
class RewardConfig:
    w_base_pos: float = 5.0
    w_base_rot: float = 2.0
    w_joint: float = 2.0
    w_action_rate: float = -0.01
    w_smooth: float = -0.02
    w_power: float = -2e-5
    w_torque: float = -1e-5
    w_base_collision: float = -10.0
    sigma_base_pos: float = 0.02
    sigma_base_rot: float = 0.01
    sigma_joint_sf: float = 0.2
    sigma_joint_landing: float = 2.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name.startswith("sigma") and v <= 0:
                raise ValueError(f"{f.name} must be positive")
            if f.name in ("w_base_pos", "w_base_rot", "w_joint") and v < 0:
                raise ValueError(f"{f.name} must be non-negative")
            if f.name.startswith("w_") and f.name not in ("w_base_pos", "w_base_rot", "w_joint") and v > 0:
                raise ValueError(f"{f.name} is a penalty weight and must be <= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "RewardConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise KeyError(f"unknown reward keys: {sorted(unknown)}")
        return cls(**d)

    def without_relaxation(self) -> "RewardConfig":
        """Ablation: landing uses the stance/flight joint sigma."""
        return RewardConfig(**{**asdict(self), "sigma_joint_landing": self.sigma_joint_sf})


@dataclass
class RewardBreakdown:
    terms: dict

    @property
    def total(self):
        return sum(self.terms.values())


def tracking_term(x, x_star, sigma, orientation: bool = False):
    """exp(-||(x* - x) / sigma||^2) over the last axis.

    With ``orientation`` the inputs are unit quaternions and the error is the
    geodesic angle between them.
    """
    if orientation:
        err = quat_angle(quat_mul(x_star, quat_conj(x))) / sigma
        return np.exp(-(err**2))
    e = np.atleast_1d((np.asarray(x_star, dtype=float) - np.asarray(x, dtype=float)) / sigma)
    return np.exp(-np.sum(e**2, axis=-1))


def joint_sigma(phase, cfg: RewardConfig):
    phase = np.asarray(phase)
    return np.where(phase == Phase.LANDING, cfg.sigma_joint_landing, cfg.sigma_joint_sf)


def compute_reward(
    base_position,
    base_orientation,
    joint_positions,
    ref_position,
    ref_orientation,
    ref_joints,
    actions,
    prev_actions,
    prev_prev_actions,
    torques,
    joint_velocities,
    phase,
    collision,
    cfg: RewardConfig = RewardConfig(),
) -> RewardBreakdown:
    """Per-term rewards; every argument may carry a leading batch dimension."""
    sig_j = joint_sigma(phase, cfg)
    terms = {
        "base_pos": cfg.w_base_pos * tracking_term(base_position, ref_position, cfg.sigma_base_pos),
        "base_rot": cfg.w_base_rot * tracking_term(base_orientation, ref_orientation, cfg.sigma_base_rot, orientation=True),
        "joint": cfg.w_joint * np.exp(-np.sum(((ref_joints - joint_positions) / np.asarray(sig_j)[..., None]) ** 2, axis=-1)),
        "action_rate": cfg.w_action_rate * np.sum((actions - prev_actions) ** 2, axis=-1),
        "smoothness": cfg.w_smooth * np.sum((actions - 2 * prev_actions + prev_prev_actions) ** 2, axis=-1),
        "power": cfg.w_power * np.sum(np.abs(torques * joint_velocities), axis=-1),
        "torque": cfg.w_torque * np.sum(torques**2, axis=-1),
        "base_collision": cfg.w_base_collision * np.asarray(collision, dtype=float),
    }
    return RewardBreakdown(terms)


def joint_tracking_gradient_scale(sigma_sf: float, sigma_landing: float) -> float:
    """Factor by which the small-error joint reward gradient shrinks at touch-down."""
    if sigma_sf <= 0 or sigma_landing <= 0:
        raise ValueError("sigmas must be positive")
    return (sigma_landing / sigma_sf) ** 2
