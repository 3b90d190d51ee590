"""Trajectory and rollout-log CSV files.

Both formats start with ``# key=value`` comment lines (config hash, seed and
whatever else is needed to rebuild the object), followed by one header row
and comma-separated data rows. Floats are written with ``repr`` so a
write/read cycle is exact.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np

from .jump_to import JumpCommand, TrajectoryKnots
from .reference import Phase, ReferenceMotion
from .rewards import TERM_NAMES, RewardConfig, compute_reward
from .robot_model import RobotMorphology
from .simulator import RolloutLog

TRAJECTORY_COLUMNS = (
    ["time_s", "phase", "r_x", "r_y", "r_z", "rdot_x", "rdot_y", "rdot_z"]
    + [f"q_{i}" for i in range(12)]
    + [f"f_{i}" for i in range(12)]
)


class TrajectoryParseError(ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


def _fmt(x) -> str:
    return repr(float(x))


def _floats(values) -> str:
    return " ".join(_fmt(v) for v in np.ravel(values))


def _write_meta(fh, meta: dict) -> None:
    for k, v in meta.items():
        fh.write(f"# {k}={v}\n")


def write_trajectory(path, knots: TrajectoryKnots, flight_joints: np.ndarray, config_hash: str = "", seed: int = 0) -> None:
    """One row per knot; flight rows take their joints from ``flight_joints``."""
    ns, nf = knots.n_stance, knots.n_flight
    cmd = knots.command or JumpCommand(knots.landing_com - knots.com[0])
    meta = {
        "config_hash": config_hash,
        "seed": seed,
        "n_stance": ns,
        "n_flight": nf,
        "durations": _floats(knots.t),
        "slack": _floats(knots.xi),
        "contact_points": _floats(knots.contact_points),
        "displacement": _floats(cmd.displacement),
        "polygon_offsets": _floats(cmd.landing_polygon_offsets),
        "status": knots.status,
        "iterations": knots.iterations,
        "landing_joints": _floats(flight_joints[:, -1]),
    }
    times = knots.knot_times
    buf = io.StringIO()
    _write_meta(buf, meta)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRAJECTORY_COLUMNS)
    for k in range(ns + nf):
        stance = k < ns
        q = knots.Q[:, k] if stance else flight_joints[:, k - ns]
        f = [_fmt(v) for v in knots.U[:, k]] if stance else [""] * 12
        row = [_fmt(times[k]), "Stance" if stance else "Flight"]
        row += [_fmt(v) for v in knots.X[:, k]] + [_fmt(v) for v in q] + f
        w.writerow(row)
    Path(path).write_text(buf.getvalue())


def _parse_meta(path, lines):
    meta = {}
    n = 0
    for n, line in enumerate(lines, start=1):
        if not line.startswith("#"):
            return meta, n
        body = line[1:].strip()
        if "=" not in body:
            raise TrajectoryParseError(path, n, f"malformed metadata line {line!r}")
        key, value = body.split("=", 1)
        meta[key.strip()] = value.strip()
    return meta, n + 1


def _meta_array(path, meta, key, shape=None):
    try:
        arr = np.array([float(v) for v in meta[key].split()])
    except KeyError:
        raise TrajectoryParseError(path, 1, f"missing metadata {key!r}") from None
    except ValueError as exc:
        raise TrajectoryParseError(path, 1, f"bad metadata {key!r}: {exc}") from None
    return arr.reshape(shape) if shape else arr


def read_trajectory(path) -> tuple[TrajectoryKnots, np.ndarray, dict]:
    """Inverse of ``write_trajectory``: (knots, flight_joints, metadata)."""
    lines = Path(path).read_text().splitlines()
    meta, header_line = _parse_meta(path, lines)
    if header_line > len(lines):
        raise TrajectoryParseError(path, header_line, "missing header row")
    header = lines[header_line - 1].split(",")
    if header != TRAJECTORY_COLUMNS:
        raise TrajectoryParseError(path, header_line, "unexpected header row")
    try:
        ns, nf = int(meta["n_stance"]), int(meta["n_flight"])
    except (KeyError, ValueError):
        raise TrajectoryParseError(path, 1, "metadata needs integer n_stance and n_flight") from None
    rows = lines[header_line:]
    if len(rows) != ns + nf:
        raise TrajectoryParseError(path, header_line + len(rows), f"expected {ns + nf} knot rows, found {len(rows)}")
    X = np.empty((6, ns + nf))
    Q = np.empty((12, ns))
    U = np.empty((12, ns))
    flight = np.empty((12, nf))
    for k, line in enumerate(rows):
        lineno = header_line + 1 + k
        cells = line.split(",")
        if len(cells) != len(TRAJECTORY_COLUMNS):
            raise TrajectoryParseError(path, lineno, f"expected {len(TRAJECTORY_COLUMNS)} fields, found {len(cells)}")
        stance = k < ns
        if cells[1] != ("Stance" if stance else "Flight"):
            raise TrajectoryParseError(path, lineno, f"unexpected phase {cells[1]!r}")
        try:
            X[:, k] = [float(c) for c in cells[2:8]]
            q = [float(c) for c in cells[8:20]]
            f = [float(c) for c in cells[20:32]] if stance else None
            if not stance and any(c for c in cells[20:32]):
                raise ValueError("forces must be empty outside stance")
        except ValueError as exc:
            raise TrajectoryParseError(path, lineno, str(exc)) from None
        if not np.all(np.isfinite(X[:, k])) or not np.all(np.isfinite(q)):
            raise TrajectoryParseError(path, lineno, "non-finite value")
        if stance:
            Q[:, k] = q
            U[:, k] = f
        else:
            flight[:, k - ns] = q
    landing = _meta_array(path, meta, "landing_joints")
    cmd = JumpCommand(_meta_array(path, meta, "displacement"), _meta_array(path, meta, "polygon_offsets", (4, 3)))
    knots = TrajectoryKnots(
        X=X,
        Q=Q,
        U=U,
        t=_meta_array(path, meta, "durations"),
        xi=_meta_array(path, meta, "slack"),
        contact_points=_meta_array(path, meta, "contact_points", (4, 3)),
        n_stance=ns,
        n_flight=nf,
        status=meta.get("status", "Converged"),
        iterations=int(meta.get("iterations", 0)),
        command=cmd,
    )
    return knots, np.hstack([flight, landing[:, None]]), meta


ROLLOUT_COLUMNS = (
    ["time", "phase", "r_x", "r_y", "r_z", "quat_w", "quat_x", "quat_y", "quat_z",
     "v_x", "v_y", "v_z", "w_x", "w_y", "w_z"]
    + [f"q_{i}" for i in range(12)]
    + [f"q_target_{i}" for i in range(12)]
    + [f"q_ref_{i}" for i in range(12)]
    + [f"qd_{i}" for i in range(12)]
    + [f"tau_{i}" for i in range(12)]
    + [f"contact_{i}" for i in range(4)]
    + ["collision"]
    + [f"reward_{t}" for t in TERM_NAMES]
)


def rollout_reward_terms(log: RolloutLog, motion: ReferenceMotion, morph: RobotMorphology,
                         cfg: RewardConfig = RewardConfig(), action_scale: float = 0.5, spawn=(0.0, 0.0, 0.0)) -> dict:
    """Reward terms of a logged rollout, treating its joint targets as actions."""
    actions = (log.joint_targets - morph.homing_joints) / action_scale
    prev = np.vstack([np.zeros((1, 12)), actions[:-1]])
    prev2 = np.vstack([np.zeros((1, 12)), prev[:-1]])
    rb = compute_reward(
        log.base_position, log.base_orientation, log.joint_positions,
        motion.base_position + np.asarray(spawn, dtype=float), motion.base_orientation, motion.joint_positions,
        actions, prev, prev2, log.joint_torques, log.joint_velocities, motion.phases, log.collision, cfg,
    )
    return rb.terms


def write_rollout_log(path, log: RolloutLog, motion: ReferenceMotion, terms: dict,
                      config_hash: str = "", seed: int = 0, extra_meta: dict | None = None) -> None:
    buf = io.StringIO()
    _write_meta(buf, {"config_hash": config_hash, "seed": seed, "dt": _fmt(log.dt), **(extra_meta or {})})
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROLLOUT_COLUMNS)
    for k in range(len(log.time)):
        row = [_fmt(log.time[k]), Phase(int(log.phase[k])).label]
        for arr in (log.base_position, log.base_orientation, log.base_lin_vel, log.base_ang_vel,
                    log.joint_positions, log.joint_targets, motion.joint_positions, log.joint_velocities,
                    log.joint_torques):
            row += [_fmt(v) for v in arr[k]]
        row += [str(int(c)) for c in log.foot_contact[k]]
        row.append(str(int(log.collision[k])))
        row += [_fmt(terms[t][k]) for t in TERM_NAMES]
        w.writerow(row)
    Path(path).write_text(buf.getvalue())


def read_rollout_log(path) -> tuple[dict, dict]:
    """Columns as float arrays (phase as labels) plus the metadata."""
    lines = Path(path).read_text().splitlines()
    meta, header_line = _parse_meta(path, lines)
    if header_line > len(lines):
        raise TrajectoryParseError(path, header_line, "missing header row")
    reader = csv.reader(lines[header_line - 1:])
    header = next(reader)
    cols = {h: [] for h in header}
    for k, row in enumerate(reader):
        if len(row) != len(header):
            raise TrajectoryParseError(path, header_line + 1 + k, f"expected {len(header)} fields, found {len(row)}")
        for h, v in zip(header, row):
            cols[h].append(v)
    out = {}
    for h, v in cols.items():
        out[h] = np.array(v) if h == "phase" else np.array([float(x) for x in v])
    return out, meta


def data_section(path) -> str:
    """File contents without the comment lines."""
    return "".join(ln for ln in Path(path).read_text().splitlines(keepends=True) if not ln.startswith("#"))
