"""Policy-rate reference motion resampled from a planned jump."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .jump_to import TrajectoryKnots

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


class Phase(enum.IntEnum):
    PRE_TRIGGER = 0
    STANCE = 1
    FLIGHT = 2
    LANDING = 3

    @property
    def label(self) -> str:
        return {0: "PreTrigger", 1: "Stance", 2: "Flight", 3: "Landing"}[int(self)]

    @classmethod
    def from_label(cls, label: str) -> "Phase":
        for p in cls:
            if p.label == label:
                return p
        raise ValueError(f"unknown phase label {label!r}")


@dataclass(frozen=True)
class ReferenceSample:
    base_position: np.ndarray
    base_orientation: np.ndarray
    joint_positions: np.ndarray
    phase: Phase


@dataclass(frozen=True)
class ReferenceMotion:
    """Reference at a fixed period ``dt``.

    Base positions are relative to the spawn point on the ground, so the
    homing pose sits at (0, 0, homing_height).
    """

    dt: float
    base_position: np.ndarray  # (T, 3)
    base_orientation: np.ndarray  # (T, 4), w-first
    joint_positions: np.ndarray  # (T, 12)
    phases: np.ndarray  # (T,) Phase values
    trigger_step: int
    stance_end_step: int
    touchdown_step: int

    def __len__(self) -> int:
        return len(self.phases)

    @property
    def duration(self) -> float:
        return len(self) * self.dt

    def __getitem__(self, step: int) -> ReferenceSample:
        step = _check_step(self, step)
        return ReferenceSample(
            self.base_position[step],
            self.base_orientation[step],
            self.joint_positions[step],
            Phase(int(self.phases[step])),
        )

    @property
    def flight_window(self) -> tuple[float, float]:
        """Nominal (take-off, touch-down) times in seconds from the episode start."""
        return self.stance_end_step * self.dt, self.touchdown_step * self.dt


def knot_reference(knots: TrajectoryKnots, flight_joints: np.ndarray, tau) -> tuple[np.ndarray, np.ndarray]:
    """CoM position and joints at times ``tau`` (seconds after the trigger).

    Linear in time between knots; clamps to the first/last knot outside the
    planned horizon. Stance joints come from ``knots.Q``, flight joints from
    the first ``n_flight`` columns of ``flight_joints``.
    """
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    times = knots.knot_times
    com = np.column_stack([np.interp(tau, times, knots.X[a]) for a in range(3)])
    joints = np.concatenate([knots.Q, flight_joints[:, : knots.n_flight]], axis=1)
    q = np.column_stack([np.interp(tau, times, joints[j]) for j in range(12)])
    return com, q


def resample(
    knots: TrajectoryKnots,
    flight_joints: np.ndarray,
    dt: float,
    pre_trigger: float = 0.5,
    post_landing: float = 1.5,
) -> ReferenceMotion:
    if dt <= 0:
        raise ValueError("dt must be positive")
    trigger = int(round(pre_trigger / dt))
    stance_end = trigger + int(round(knots.t_stance / dt))
    touchdown = trigger + int(round((knots.t_stance + knots.t_flight) / dt))
    total = touchdown + int(round(post_landing / dt))

    steps = np.arange(total)
    tau = (steps - trigger) * dt
    com, q = knot_reference(knots, flight_joints, tau)

    home_com = knots.X[:3, 0]
    home_q = knots.Q[:, 0]
    land_q = flight_joints[:, -1]
    pre = steps < trigger
    com[pre] = home_com
    q[pre] = home_q
    land = steps >= touchdown
    com[land] = knots.X[:3, -1]
    q[land] = land_q

    phases = np.full(total, Phase.FLIGHT, dtype=np.int8)
    phases[steps < stance_end] = Phase.STANCE
    phases[pre] = Phase.PRE_TRIGGER
    phases[land] = Phase.LANDING
    return ReferenceMotion(
        dt=dt,
        base_position=com,
        base_orientation=np.tile(IDENTITY_QUAT, (total, 1)),
        joint_positions=q,
        phases=phases,
        trigger_step=trigger,
        stance_end_step=stance_end,
        touchdown_step=touchdown,
    )


def _check_step(motion: ReferenceMotion, step) -> int:
    step = int(step)
    if not 0 <= step < len(motion):
        raise IndexError(f"step {step} outside episode of {len(motion)} steps")
    return step


def phase_at(motion: ReferenceMotion, step: int) -> Phase:
    return Phase(int(motion.phases[_check_step(motion, step)]))
