"""Quadruped morphology and per-leg kinematics.

Legs are ordered FL, FR, HL, HR. Each leg has three joints (hip roll about
the body x axis, thigh pitch, calf pitch). At zero configuration the leg
points straight down; positive thigh pitch swings the foot forward, and the
knee-backward branch has calf pitch <= 0.

All kinematic functions work in the body frame with the origin at the CoM
and broadcast over leading batch dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

LEG_NAMES = ("FL", "FR", "HL", "HR")
JOINT_NAMES = ("hip_roll", "thigh_pitch", "calf_pitch")
NUM_LEGS = 4
NUM_JOINTS = 12

# (x sign, y sign) per leg
_LEG_SIGNS = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])


class OutOfReach(ValueError):
    """Foot target outside the reachable workspace of a leg."""


@dataclass(frozen=True)
class LegJointAngles:
    hip_roll: float
    thigh_pitch: float
    calf_pitch: float

    def as_array(self) -> np.ndarray:
        return np.array([self.hip_roll, self.thigh_pitch, self.calf_pitch])

    @classmethod
    def from_array(cls, q) -> "LegJointAngles":
        q = np.asarray(q, dtype=float).reshape(3)
        return cls(float(q[0]), float(q[1]), float(q[2]))


@dataclass(frozen=True)
class RobotMorphology:
    mass: float = 12.0
    body_inertia: tuple = (0.02, 0.06, 0.07)
    # half extents of the homing feet polygon, realized by hip placement
    hip_x: float = 0.181
    hip_y: float = 0.131
    hip_offset: float = 0.0
    thigh_length: float = 0.2
    calf_length: float = 0.2
    torque_limit: float = 33.5
    hip_roll_limits: tuple = (-0.8, 0.8)
    thigh_pitch_limits: tuple = (-1.0, 3.9)
    calf_pitch_limits: tuple = (-2.7, -0.9)
    homing_joint_angles: tuple = (0.0, 0.896, -1.791)
    homing_height: float = 0.25
    body_size: tuple = (0.27, 0.19, 0.11)

    def __post_init__(self):
        if self.mass <= 0:
            raise ValueError("mass must be positive")
        if self.thigh_length <= 0 or self.calf_length <= 0:
            raise ValueError("link lengths must be positive")
        if self.torque_limit <= 0:
            raise ValueError("torque_limit must be positive")
        for lo, hi in (self.hip_roll_limits, self.thigh_pitch_limits, self.calf_pitch_limits):
            if lo > hi:
                raise ValueError("joint limit lower bound exceeds upper bound")

    @classmethod
    def from_dict(cls, d: dict) -> "RobotMorphology":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise KeyError(f"unknown morphology keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return replace(cls(), **kw)

    @property
    def inertia_matrix(self) -> np.ndarray:
        return np.diag(np.asarray(self.body_inertia, dtype=float))

    @property
    def hip_positions(self) -> np.ndarray:
        """(4, 3) hip positions in the body frame."""
        xy = _LEG_SIGNS * np.array([self.hip_x, self.hip_y])
        return np.column_stack([xy, np.zeros(4)])

    @property
    def lateral_offsets(self) -> np.ndarray:
        """Signed hip lateral link offset per leg (outward positive)."""
        return _LEG_SIGNS[:, 1] * self.hip_offset

    @property
    def joint_lower(self) -> np.ndarray:
        lo = np.array([self.hip_roll_limits[0], self.thigh_pitch_limits[0], self.calf_pitch_limits[0]])
        return np.tile(lo, NUM_LEGS)

    @property
    def joint_upper(self) -> np.ndarray:
        hi = np.array([self.hip_roll_limits[1], self.thigh_pitch_limits[1], self.calf_pitch_limits[1]])
        return np.tile(hi, NUM_LEGS)

    @property
    def homing_joints(self) -> np.ndarray:
        """Homing configuration for all 12 joints."""
        return np.tile(np.asarray(self.homing_joint_angles, dtype=float), NUM_LEGS)

    @property
    def homing_feet(self) -> np.ndarray:
        """(4, 3) homing foot positions in the body frame."""
        return feet_fk(self.homing_joints, self)

    @property
    def reach(self) -> tuple[float, float]:
        return abs(self.thigh_length - self.calf_length), self.thigh_length + self.calf_length


def _rot_x(phi):
    c, s = np.cos(phi), np.sin(phi)
    return c, s


def _planar(q, l1, l2):
    t1 = q[..., 1]
    t12 = q[..., 1] + q[..., 2]
    x = l1 * np.sin(t1) + l2 * np.sin(t12)
    z = -l1 * np.cos(t1) - l2 * np.cos(t12)
    return x, z


def leg_fk_local(q, leg_index: int, morph: RobotMorphology) -> np.ndarray:
    """Foot position relative to the hip. ``q`` has shape (..., 3)."""
    q = np.asarray(q, dtype=float)
    x, z = _planar(q, morph.thigh_length, morph.calf_length)
    d = morph.lateral_offsets[leg_index]
    c, s = _rot_x(q[..., 0])
    return np.stack([x, c * d - s * z, s * d + c * z], axis=-1)


def leg_fk(q, leg_index: int, morph: RobotMorphology) -> np.ndarray:
    """Foot position in the body frame."""
    if isinstance(q, LegJointAngles):
        q = q.as_array()
    return morph.hip_positions[leg_index] + leg_fk_local(q, leg_index, morph)


def leg_jacobian(q, leg_index: int, morph: RobotMorphology) -> np.ndarray:
    """d(foot)/dq, shape (..., 3, 3) with columns ordered like the joints."""
    if isinstance(q, LegJointAngles):
        q = q.as_array()
    q = np.asarray(q, dtype=float)
    l1, l2 = morph.thigh_length, morph.calf_length
    d = morph.lateral_offsets[leg_index]
    t1 = q[..., 1]
    t12 = q[..., 1] + q[..., 2]
    x, z = _planar(q, l1, l2)
    dx1 = l1 * np.cos(t1) + l2 * np.cos(t12)
    dx2 = l2 * np.cos(t12)
    dz1 = l1 * np.sin(t1) + l2 * np.sin(t12)
    dz2 = l2 * np.sin(t12)
    c, s = _rot_x(q[..., 0])
    zero = np.zeros_like(x)
    col_roll = np.stack([zero, -s * d - c * z, c * d - s * z], axis=-1)
    col_1 = np.stack([dx1, -s * dz1, c * dz1], axis=-1)
    col_2 = np.stack([dx2, -s * dz2, c * dz2], axis=-1)
    return np.stack([col_roll, col_1, col_2], axis=-1)


def leg_jacobian_derivative(q, leg_index: int, morph: RobotMorphology) -> np.ndarray:
    """Second derivatives of the foot position, shape (..., 3, 3, 3).

    Entry ``[..., a, i, j]`` is d^2 p_a / dq_i dq_j.
    """
    q = np.asarray(q, dtype=float)
    l1, l2 = morph.thigh_length, morph.calf_length
    d = morph.lateral_offsets[leg_index]
    t1 = q[..., 1]
    t12 = q[..., 1] + q[..., 2]
    x, z = _planar(q, l1, l2)
    dx1 = l1 * np.cos(t1) + l2 * np.cos(t12)
    dx2 = l2 * np.cos(t12)
    dz1 = l1 * np.sin(t1) + l2 * np.sin(t12)
    dz2 = l2 * np.sin(t12)
    dxx11 = -dz1
    dxx12 = -dz2
    dzz11 = dx1
    dzz12 = dx2
    c, s = _rot_x(q[..., 0])
    zero = np.zeros_like(x)

    def vec(vx, vy, vz):
        return np.stack([vx, vy, vz], axis=-1)

    # rotation of planar vector (vx, vd, vz): (vx, c*vd - s*vz, s*vd + c*vz)
    h_rr = vec(zero, -c * d + s * z, -s * d - c * z)
    h_r1 = vec(zero, -c * dz1, -s * dz1)
    h_r2 = vec(zero, -c * dz2, -s * dz2)
    h_11 = vec(dxx11, -s * dzz11, c * dzz11)
    h_12 = vec(dxx12, -s * dzz12, c * dzz12)
    h_22 = h_12
    rows = [
        np.stack([h_rr, h_r1, h_r2], axis=-1),
        np.stack([h_r1, h_11, h_12], axis=-1),
        np.stack([h_r2, h_12, h_22], axis=-1),
    ]
    # (..., 3[a], 3[i], 3[j])
    return np.stack(rows, axis=-2)


def leg_ik(foot_pos_body, leg_index: int, morph: RobotMorphology) -> LegJointAngles:
    """Inverse kinematics on the knee-backward branch."""
    q = leg_ik_array(foot_pos_body, leg_index, morph)
    return LegJointAngles.from_array(q)


def leg_ik_array(foot_pos_body, leg_index: int, morph: RobotMorphology) -> np.ndarray:
    p = np.asarray(foot_pos_body, dtype=float) - morph.hip_positions[leg_index]
    l1, l2 = morph.thigh_length, morph.calf_length
    d = morph.lateral_offsets[leg_index]
    py, pz = p[..., 1], p[..., 2]
    r_yz2 = py**2 + pz**2
    if np.any(r_yz2 < d**2):
        raise OutOfReach(f"leg {LEG_NAMES[leg_index]}: target inside the hip offset circle")
    zp = -np.sqrt(r_yz2 - d**2)
    roll = np.arctan2(pz, py) - np.arctan2(zp, d)
    roll = (roll + np.pi) % (2 * np.pi) - np.pi
    dist = np.sqrt(p[..., 0] ** 2 + zp**2)
    lo, hi = abs(l1 - l2), l1 + l2
    eps = 1e-12
    if np.any(dist > hi + eps) or np.any(dist < lo - eps):
        raise OutOfReach(
            f"leg {LEG_NAMES[leg_index]}: distance {np.max(dist):.4f} m outside reach [{lo:.3f}, {hi:.3f}] m"
        )
    cos2 = np.clip((dist**2 - l1**2 - l2**2) / (2 * l1 * l2), -1.0, 1.0)
    calf = -np.arccos(cos2)
    alpha = np.arctan2(p[..., 0], -zp)
    beta = np.arctan2(l2 * np.sin(calf), l1 + l2 * np.cos(calf))
    thigh = alpha - beta
    return np.stack([roll, thigh, calf], axis=-1)


def feet_fk(joints, morph: RobotMorphology) -> np.ndarray:
    """All four feet in the body frame. ``joints`` (..., 12) -> (..., 4, 3)."""
    joints = np.asarray(joints, dtype=float)
    q = joints.reshape(joints.shape[:-1] + (NUM_LEGS, 3))
    out = [leg_fk(q[..., i, :], i, morph) for i in range(NUM_LEGS)]
    return np.stack(out, axis=-2)


def feet_jacobians(joints, morph: RobotMorphology) -> np.ndarray:
    """(..., 12) -> (..., 4, 3, 3)."""
    joints = np.asarray(joints, dtype=float)
    q = joints.reshape(joints.shape[:-1] + (NUM_LEGS, 3))
    return np.stack([leg_jacobian(q[..., i, :], i, morph) for i in range(NUM_LEGS)], axis=-3)


def feet_ik(feet_body, morph: RobotMorphology) -> np.ndarray:
    """(..., 4, 3) foot targets -> (..., 12) joints."""
    feet_body = np.asarray(feet_body, dtype=float)
    q = [leg_ik_array(feet_body[..., i, :], i, morph) for i in range(NUM_LEGS)]
    return np.concatenate(q, axis=-1)
