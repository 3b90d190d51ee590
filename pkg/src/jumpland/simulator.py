"""Single-rigid-body quadruped simulator with massless legs and penalty contact.

Each leg is a massless 3-DOF chain whose joints carry only rotor inertia.
Foot contact forces act on the base directly at the foot points; joint
accelerations follow ``I_rotor * qdd = tau + J^T f``. All arrays carry a
leading batch dimension so one call steps many environments.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .reference import ReferenceMotion
from .robot_model import RobotMorphology, feet_fk, feet_jacobians

GRAVITY = np.array([0.0, 0.0, -9.81])
MAX_POSITION = 100.0
MAX_JOINT_VELOCITY = 500.0


class NumericalDivergence(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# quaternions, w-first


def quat_to_rot(q):
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        axis=-2,
    )


def quat_mul(a, b):
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=float), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conj(q):
    q = np.array(q, dtype=float)
    q[..., 1:] *= -1
    return q


def quat_from_rotvec(v):
    v = np.asarray(v, dtype=float)
    angle = np.linalg.norm(v, axis=-1, keepdims=True)
    half = 0.5 * angle
    # sin(half)/angle, with the small-angle limit 1/2
    k = np.where(angle > 1e-12, np.sin(half) / np.where(angle > 1e-12, angle, 1.0), 0.5)
    return np.concatenate([np.cos(half), k * v], axis=-1)


def quat_angle(q):
    """Rotation angle in [0, pi] of a unit quaternion (sign-invariant)."""
    w = np.abs(np.asarray(q, dtype=float)[..., 0])
    v = np.linalg.norm(np.asarray(q, dtype=float)[..., 1:], axis=-1)
    return 2.0 * np.arctan2(v, w)


def rotate_inverse(q, v):
    """Express world vector ``v`` in the frame of orientation ``q``."""
    return np.einsum("...ji,...j->...i", quat_to_rot(q), v)


def roll_pitch(q):
    R = quat_to_rot(q)
    pitch = np.arcsin(np.clip(-R[..., 2, 0], -1.0, 1.0))
    roll = np.arctan2(R[..., 2, 1], R[..., 2, 2])
    return roll, pitch


# ---------------------------------------------------------------------------
# terrain


@dataclass(frozen=True)
class TerrainParams:
    max_height: float = 0.1
    num_obstacles: int = 1500
    min_size: float = 0.4
    max_size: float = 2.0
    platform_size: float = 5.0
    terrain_size: float = 20.0
    cell_size: float = 0.05
    friction: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "num_obstacles":
                if v < 0:
                    raise ValueError("num_obstacles must be non-negative")
            elif v <= 0:
                raise ValueError(f"{f.name} must be positive")
        if self.min_size > self.max_size:
            raise ValueError("min_size exceeds max_size")
        if self.platform_size > self.terrain_size:
            raise ValueError(
                f"platform of {self.platform_size} m does not fit in a {self.terrain_size} m terrain"
            )


@dataclass
class Terrain:
    """Heightfield on a regular grid; ``heights[i, j]`` sits at ``origin + (j, i) * cell_size``."""

    heights: np.ndarray
    cell_size: float
    origin: np.ndarray = field(default_factory=lambda: np.zeros(2))
    friction: float = 1.0
    obstacles: np.ndarray = field(default_factory=lambda: np.zeros((0, 5)))  # cx, cy, sx, sy, h

    def __post_init__(self):
        self.heights = np.asarray(self.heights, dtype=float)
        self.origin = np.asarray(self.origin, dtype=float)

    @classmethod
    def flat(cls, size: float = 20.0, cell_size: float = 0.1, friction: float = 1.0) -> "Terrain":
        n = int(round(size / cell_size)) + 1
        return cls(np.zeros((n, n)), cell_size, np.full(2, -0.5 * size), friction)

    @property
    def shape(self) -> tuple[int, int]:
        return self.heights.shape

    @property
    def extent(self) -> np.ndarray:
        rows, cols = self.heights.shape
        return self.origin + self.cell_size * np.array([cols - 1, rows - 1])

    def height_at(self, x, y) -> np.ndarray:
        """Bilinear height; points outside the grid see the nearest edge."""
        rows, cols = self.heights.shape
        gx = np.clip((np.asarray(x, dtype=float) - self.origin[0]) / self.cell_size, 0.0, cols - 1.0)
        gy = np.clip((np.asarray(y, dtype=float) - self.origin[1]) / self.cell_size, 0.0, rows - 1.0)
        j0 = np.minimum(gx.astype(int), cols - 2)
        i0 = np.minimum(gy.astype(int), rows - 2)
        tx, ty = gx - j0, gy - i0
        h = self.heights
        return (
            h[i0, j0] * (1 - tx) * (1 - ty)
            + h[i0, j0 + 1] * tx * (1 - ty)
            + h[i0 + 1, j0] * (1 - tx) * ty
            + h[i0 + 1, j0 + 1] * tx * ty
        )

    def add_box(self, center, size, height):
        """Raise an axis-aligned rectangle to ``height`` (max with what is there)."""
        c = np.asarray(center, dtype=float)
        s = np.asarray(size, dtype=float)
        rows, cols = self.heights.shape
        xs = self.origin[0] + self.cell_size * np.arange(cols)
        ys = self.origin[1] + self.cell_size * np.arange(rows)
        mx = np.abs(xs - c[0]) <= 0.5 * s[0]
        my = np.abs(ys - c[1]) <= 0.5 * s[1]
        block = np.ix_(my, mx)
        self.heights[block] = np.maximum(self.heights[block], height)
        self.obstacles = np.vstack([self.obstacles, [c[0], c[1], s[0], s[1], height]])

    def export(self, path):
        """Grid text format: a ``cols rows cell_size`` header, then one row of heights per line."""
        rows, cols = self.heights.shape
        with open(path, "w") as fh:
            fh.write(f"{cols} {rows} {self.cell_size!r}\n")
            for row in self.heights:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")

    @classmethod
    def load(cls, path, friction: float = 1.0) -> "Terrain":
        lines = Path(path).read_text().splitlines()
        cols, rows, cell = lines[0].split()
        cols, rows, cell = int(cols), int(rows), float(cell)
        heights = np.array([[float(v) for v in ln.split()] for ln in lines[1 : rows + 1]])
        if heights.shape != (rows, cols):
            raise ValueError(f"{path}: expected {rows}x{cols} heights, got {heights.shape}")
        origin = -0.5 * cell * np.array([cols - 1, rows - 1])
        return cls(heights, cell, origin, friction)


def generate_terrain(params: TerrainParams | None = None, seed: int = 0) -> Terrain:
    """Discrete-obstacle terrain centred on a flat square platform."""
    p = params or TerrainParams()
    rng = np.random.default_rng(seed)
    n = int(round(p.terrain_size / p.cell_size)) + 1
    half = 0.5 * p.terrain_size
    terrain = Terrain(np.zeros((n, n)), p.cell_size, np.full(2, -half), p.friction)
    centers = rng.uniform(-half, half, size=(p.num_obstacles, 2))
    sizes = rng.uniform(p.min_size, p.max_size, size=(p.num_obstacles, 2))
    # (0, max] rather than [0, max)
    heights = p.max_height * (1.0 - rng.uniform(0.0, 1.0, size=p.num_obstacles))
    for c, s, h in zip(centers, sizes, heights):
        terrain.add_box(c, s, h)
    xs = terrain.origin[0] + p.cell_size * np.arange(n)
    flat = np.abs(xs) <= 0.5 * p.platform_size
    terrain.heights[np.ix_(flat, flat)] = 0.0
    return terrain


# ---------------------------------------------------------------------------
# contact


@dataclass(frozen=True)
class ContactParams:
    kn: float = 1e4
    dn: float = 100.0
    kt: float = 5e3


def _contact(foot_pos, foot_vel, ground, mu, anchor, in_contact, params: ContactParams):
    """Vectorized penalty contact over (..., 3) feet.

    The tangential force is a spring to an anchor point set at first contact;
    when it exceeds the Coulomb cap the anchor slides so the spring sits on
    the cap. Returns (force, new_anchor, contact_flag, normal_damping_active).
    """
    depth = ground - foot_pos[..., 2]
    touching = depth > 0
    fn_raw = params.kn * depth - params.dn * foot_vel[..., 2]
    fn = np.where(touching, np.maximum(fn_raw, 0.0), 0.0)
    xy = foot_pos[..., :2]
    anchor = np.where((touching & in_contact)[..., None], anchor, xy)
    ft = -params.kt * (xy - anchor)
    cap = mu * fn
    mag = np.linalg.norm(ft, axis=-1)
    over = mag > cap
    scale = np.where(over, cap / np.where(mag > 0, mag, 1.0), 1.0)
    ft = ft * scale[..., None]
    anchor = np.where(over[..., None], xy + ft / params.kt, anchor)
    force = np.concatenate([ft, fn[..., None]], axis=-1)
    return force, anchor, touching, touching & (fn_raw > 0)


def contact_force(foot_pos, foot_vel, terrain: Terrain, params: ContactParams | None = None, anchor=None, mu=None):
    """Contact force on a foot (3-vector, N).

    ``anchor`` is the xy point where the foot first touched down; it defaults
    to the current foot position (no tangential stretch).
    """
    params = params or ContactParams()
    foot_pos = np.asarray(foot_pos, dtype=float)
    foot_vel = np.asarray(foot_vel, dtype=float)
    ground = terrain.height_at(foot_pos[..., 0], foot_pos[..., 1])
    anchor = foot_pos[..., :2] if anchor is None else np.asarray(anchor, dtype=float)
    mu = terrain.friction if mu is None else mu
    f, _, _, _ = _contact(foot_pos, foot_vel, ground, mu, anchor, np.ones(foot_pos.shape[:-1], bool), params)
    return f


# ---------------------------------------------------------------------------
# state and stepping


@dataclass(frozen=True)
class PdParams:
    kp: np.ndarray | float = 20.0
    kd: np.ndarray | float = 0.8

    def __post_init__(self):
        if np.any(np.asarray(self.kp) < 0) or np.any(np.asarray(self.kd) < 0):
            raise ValueError("PD gains must be non-negative")


@dataclass(frozen=True)
class SimParams:
    dt: float = 0.001
    decimation: int = 20
    rotor_inertia: float = 0.0025
    contact: ContactParams = field(default_factory=ContactParams)

    @classmethod
    def from_dict(cls, d: dict) -> "SimParams":
        d = dict(d)
        contact = ContactParams(**{k: d.pop(k) for k in ("kn", "dn", "kt") if k in d})
        return cls(contact=contact, **d)


@dataclass
class SimState:
    """Simulator state; every field may carry a leading batch dimension."""

    base_position: np.ndarray
    base_orientation: np.ndarray
    base_lin_vel: np.ndarray  # world frame
    base_ang_vel: np.ndarray  # body frame
    joint_positions: np.ndarray
    joint_velocities: np.ndarray
    foot_contact: np.ndarray
    time: np.ndarray | float = 0.0
    contact_anchor: np.ndarray | None = None
    joint_torques: np.ndarray | None = None
    contact_forces: np.ndarray | None = None

    def copy(self) -> "SimState":
        return SimState(**{f.name: (None if getattr(self, f.name) is None else np.copy(getattr(self, f.name)))
                           for f in fields(self)})

    @property
    def batch_shape(self) -> tuple:
        return np.shape(self.base_position)[:-1]

    def index(self, i) -> "SimState":
        return SimState(**{f.name: _take(getattr(self, f.name), i) for f in fields(self)})

    def assign(self, mask, other: "SimState"):
        """Overwrite environments selected by boolean ``mask`` with ``other``'s."""
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if a is None or b is None:
                continue
            a[mask] = b[mask]

    def energy(self, morph: RobotMorphology) -> np.ndarray:
        """Base translational + rotational kinetic energy plus potential energy (z = 0 reference)."""
        I = np.asarray(morph.body_inertia)
        kin = 0.5 * morph.mass * np.sum(self.base_lin_vel**2, axis=-1)
        rot = 0.5 * np.sum(I * self.base_ang_vel**2, axis=-1)
        return kin + rot + morph.mass * 9.81 * self.base_position[..., 2]


def _take(a, i):
    if a is None:
        return None
    a = np.asarray(a)
    return a[i].copy() if a.ndim else a.copy()


def homing_state(morph: RobotMorphology, batch: int | None = None, xy=(0.0, 0.0), ground: float = 0.0) -> SimState:
    """Robot at homing pose with feet resting on the ground at height ``ground``."""
    q = morph.homing_joints
    feet = feet_fk(q, morph)
    z = ground - float(np.mean(feet[:, 2]))
    shape = () if batch is None else (batch,)
    xy = np.broadcast_to(np.asarray(xy, dtype=float), shape + (2,))
    pos = np.concatenate([xy, np.full(shape + (1,), z)], axis=-1)
    anchor = pos[..., None, :2] + feet[:, :2]
    return SimState(
        base_position=pos.copy(),
        base_orientation=np.broadcast_to([1.0, 0.0, 0.0, 0.0], shape + (4,)).copy(),
        base_lin_vel=np.zeros(shape + (3,)),
        base_ang_vel=np.zeros(shape + (3,)),
        joint_positions=np.broadcast_to(q, shape + (12,)).copy(),
        joint_velocities=np.zeros(shape + (12,)),
        foot_contact=np.zeros(shape + (4,), bool),
        time=np.zeros(shape),
        contact_anchor=anchor.copy(),
        joint_torques=np.zeros(shape + (12,)),
        contact_forces=np.zeros(shape + (4, 3)),
    )


def pd_torque(q_target, q, qd, pd: PdParams, limit: float):
    tau = np.asarray(pd.kp) * (q_target - q) - np.asarray(pd.kd) * qd
    return np.clip(tau, -limit, limit)


def step_batch(
    state: SimState,
    joint_targets,
    pd: PdParams,
    terrain: Terrain,
    morph: RobotMorphology,
    params: SimParams = SimParams(),
    mu=None,
    external_torque=None,
    backend: str = "auto",
) -> SimState:
    """Advance every environment by one physics tick (no divergence check).

    ``mu`` optionally overrides the terrain friction per environment.
    ``external_torque`` replaces the PD law when given (used by tests).
    ``backend`` is "numpy", "compiled" or "auto"; the compiled kernel handles
    flat (B,) batches and is used for those under "auto".
    """
    if backend not in ("auto", "numpy", "compiled"):
        raise ValueError(f"unknown backend {backend!r}")
    flat_batch = len(state.batch_shape) == 1 and state.contact_anchor is not None
    if backend == "compiled" or (backend == "auto" and flat_batch):
        if not flat_batch:
            raise ValueError("compiled backend needs a (B,) batch with contact anchors")
        return _step_compiled(state, joint_targets, pd, terrain, morph, params, mu, external_torque)
    dt = params.dt
    s = state
    B = s.batch_shape
    R = quat_to_rot(s.base_orientation)
    q, qd = s.joint_positions, s.joint_velocities
    feet_b = feet_fk(q, morph)  # (..., 4, 3)
    J = feet_jacobians(q, morph)  # (..., 4, 3, 3)
    qd_leg = qd.reshape(B + (4, 3))
    foot_vel_b = np.cross(s.base_ang_vel[..., None, :], feet_b) + np.einsum("...ij,...j->...i", J, qd_leg)
    foot_w = s.base_position[..., None, :] + np.einsum("...ij,...fj->...fi", R, feet_b)
    foot_vel_w = s.base_lin_vel[..., None, :] + np.einsum("...ij,...fj->...fi", R, foot_vel_b)

    ground = terrain.height_at(foot_w[..., 0], foot_w[..., 1])
    mu = terrain.friction if mu is None else np.asarray(mu, dtype=float)[..., None]
    anchor = s.contact_anchor if s.contact_anchor is not None else foot_w[..., :2]
    f_w, anchor, touching, damping_on = _contact(foot_w, foot_vel_w, ground, mu, anchor, s.foot_contact, params.contact)

    # joints: linearly implicit in the velocity-dependent terms
    limit = morph.torque_limit
    if external_torque is None:
        tau_raw = np.asarray(pd.kp) * (joint_targets - q) - np.asarray(pd.kd) * qd
        tau = np.clip(tau_raw, -limit, limit)
        kd_eff = np.where(np.abs(tau_raw) < limit, np.broadcast_to(np.asarray(pd.kd, dtype=float), tau.shape), 0.0)
    else:
        tau = np.broadcast_to(np.asarray(external_torque, dtype=float), q.shape)
        kd_eff = np.zeros(q.shape)
    f_b = np.einsum("...ji,...fj->...fi", R, f_w)
    gen = tau.reshape(B + (4, 3)) + np.einsum("...fij,...fi->...fj", J, f_b)
    n_b = R[..., 2, :]  # world z in the body frame
    a = np.einsum("...fij,...i->...fj", J, n_b)  # (..., 4, 3)
    dn = params.contact.dn * damping_on
    D = (dn[..., None, None] * a[..., :, None] * a[..., None, :]
         + kd_eff.reshape(B + (4, 3))[..., None] * np.eye(3))
    M = params.rotor_inertia * np.eye(3) + dt * D
    qdd = np.linalg.solve(M, gen[..., None])[..., 0]
    qd_new = qd + dt * qdd.reshape(B + (12,))
    q_new = q + dt * qd_new

    # base
    inertia = np.asarray(morph.body_inertia, dtype=float)
    F = f_w.sum(axis=-2)
    acc = F / morph.mass + GRAVITY
    v_new = s.base_lin_vel + dt * acc
    # exact for the gravity part, symplectic for contact forces
    pos_new = s.base_position + dt * v_new - 0.5 * dt * dt * GRAVITY
    w = s.base_ang_vel
    torque_b = np.cross(feet_b, f_b).sum(axis=-2)
    w_dot = (torque_b - np.cross(w, inertia * w)) / inertia
    w_new = w + dt * w_dot
    quat = quat_mul(s.base_orientation, quat_from_rotvec(dt * w_new))
    quat /= np.linalg.norm(quat, axis=-1, keepdims=True)

    return SimState(
        base_position=pos_new,
        base_orientation=quat,
        base_lin_vel=v_new,
        base_ang_vel=w_new,
        joint_positions=q_new,
        joint_velocities=qd_new,
        foot_contact=touching,
        time=np.asarray(s.time) + dt,
        contact_anchor=anchor,
        joint_torques=tau.copy(),
        contact_forces=f_w,
    )


def _step_compiled(state, joint_targets, pd, terrain, morph, params, mu, external_torque) -> SimState:
    from ._fastsim import step_kernel

    s = state
    B = s.batch_shape[0]
    f64 = lambda a: np.ascontiguousarray(a, dtype=float)
    mu = np.broadcast_to(terrain.friction if mu is None else np.asarray(mu, dtype=float), (B,))
    use_ext = external_torque is not None
    ext = np.broadcast_to(np.asarray(external_torque if use_ext else 0.0, dtype=float), (B, 12))
    targets = np.broadcast_to(np.asarray(0.0 if joint_targets is None else joint_targets, dtype=float), (B, 12))
    out = step_kernel(
        f64(s.base_position), f64(s.base_orientation), f64(s.base_lin_vel), f64(s.base_ang_vel),
        f64(s.joint_positions), f64(s.joint_velocities), np.ascontiguousarray(s.foot_contact, dtype=np.bool_),
        f64(s.contact_anchor), f64(targets),
        f64(np.broadcast_to(pd.kp, (12,))), f64(np.broadcast_to(pd.kd, (12,))), f64(ext), use_ext,
        f64(terrain.heights), float(terrain.origin[0]), float(terrain.origin[1]), float(terrain.cell_size), f64(mu),
        params.contact.kn, params.contact.dn, params.contact.kt, params.dt, params.rotor_inertia,
        float(morph.torque_limit), float(morph.mass), f64(morph.body_inertia), f64(morph.hip_positions),
        f64(morph.lateral_offsets), float(morph.thigh_length), float(morph.calf_length),
    )
    pos, quat, vel, om, q, qd, touch, anchor, tau, force = out
    return SimState(pos, quat, vel, om, q, qd, touch, np.asarray(s.time) + params.dt, anchor, tau, force)


def diverged(state: SimState) -> np.ndarray:
    bad = ~np.isfinite(state.base_position).all(axis=-1)
    bad |= ~np.isfinite(state.joint_velocities).all(axis=-1)
    bad |= ~np.isfinite(state.base_orientation).all(axis=-1)
    with np.errstate(invalid="ignore"):
        bad |= np.linalg.norm(state.base_position, axis=-1) > MAX_POSITION
        bad |= np.max(np.abs(state.joint_velocities), axis=-1) > MAX_JOINT_VELOCITY
    return bad


def step(state: SimState, joint_targets, pd: PdParams, terrain: Terrain, morph: RobotMorphology,
         params: SimParams = SimParams(), **kw) -> SimState:
    """One physics tick; raises ``NumericalDivergence`` on runaway states."""
    new = step_batch(state, joint_targets, pd, terrain, morph, params, **kw)
    if np.any(diverged(new)):
        raise NumericalDivergence(f"simulation diverged at t={float(np.max(new.time)):.3f} s")
    return new


_BOX_UNIT = np.array(
    [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]
    + [[0, 0, -1], [1, 0, -1], [-1, 0, -1], [0, 1, -1], [0, -1, -1]],
    dtype=float,
)


def base_collision(state: SimState, terrain: Terrain, morph: RobotMorphology) -> np.ndarray:
    """True where any probe point of the body box is below the terrain."""
    pts_b = 0.5 * _BOX_UNIT * np.asarray(morph.body_size)
    R = quat_to_rot(state.base_orientation)
    pts = state.base_position[..., None, :] + np.einsum("...ij,pj->...pi", R, pts_b)
    return np.any(pts[..., 2] < terrain.height_at(pts[..., 0], pts[..., 1]), axis=-1)


# ---------------------------------------------------------------------------
# open-loop rollout


@dataclass
class RolloutLog:
    dt: float
    time: np.ndarray
    phase: np.ndarray
    base_position: np.ndarray
    base_orientation: np.ndarray
    base_lin_vel: np.ndarray
    base_ang_vel: np.ndarray
    joint_positions: np.ndarray
    joint_velocities: np.ndarray
    joint_targets: np.ndarray
    joint_torques: np.ndarray
    foot_contact: np.ndarray
    airborne_ticks: np.ndarray  # ticks per policy step with all four feet off the ground
    collision: np.ndarray

    @property
    def airborne_windows(self) -> list[tuple[float, float]]:
        """Maximal intervals (s) of consecutive policy steps fully airborne at the step end."""
        air = ~self.foot_contact.any(axis=1)
        out, start = [], None
        for k, a in enumerate(air):
            if a and start is None:
                start = k
            if not a and start is not None:
                out.append((float(self.time[start] - self.dt), float(self.time[k - 1])))
                start = None
        if start is not None:
            out.append((float(self.time[start] - self.dt), float(self.time[-1])))
        return out


def rollout_pd(
    motion: ReferenceMotion,
    pd: PdParams,
    terrain: Terrain,
    morph: RobotMorphology,
    decimation: int = 20,
    params: SimParams = SimParams(),
    spawn=(0.0, 0.0),
) -> RolloutLog:
    """Track the reference joints open loop with the PD controller."""
    params = replace(params, decimation=decimation)
    state = homing_state(morph, xy=spawn, ground=float(terrain.height_at(*spawn)))
    T = len(motion)
    rec = {k: [] for k in ("pos", "quat", "v", "w", "q", "qd", "tgt", "tau", "contact", "air", "coll")}
    for k in range(T):
        target = motion.joint_positions[k]
        air = 0
        for _ in range(decimation):
            try:
                state = step(state, target, pd, terrain, morph, params)
            except NumericalDivergence as exc:
                raise NumericalDivergence(f"policy step {k}: {exc}") from exc
            air += int(not state.foot_contact.any())
        rec["pos"].append(state.base_position)
        rec["quat"].append(state.base_orientation)
        rec["v"].append(state.base_lin_vel)
        rec["w"].append(state.base_ang_vel)
        rec["q"].append(state.joint_positions)
        rec["qd"].append(state.joint_velocities)
        rec["tgt"].append(target)
        rec["tau"].append(state.joint_torques)
        rec["contact"].append(state.foot_contact)
        rec["air"].append(air)
        rec["coll"].append(bool(base_collision(state, terrain, morph)))
    policy_dt = decimation * params.dt
    return RolloutLog(
        dt=policy_dt,
        time=policy_dt * np.arange(1, T + 1),
        phase=np.asarray(motion.phases).copy(),
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


def flight_overlap(log: RolloutLog, motion: ReferenceMotion) -> float:
    """Fraction of the reference flight window covered by the longest simulated airborne window."""
    t0, t1 = motion.flight_window
    best = 0.0
    for a, b in log.airborne_windows:
        best = max(best, max(0.0, min(b, t1) - max(a, t0)))
    return best / (t1 - t0)
