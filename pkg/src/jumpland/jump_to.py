"""Kino-dynamic jump trajectory optimization over centroidal dynamics.

The trajectory is split into ``n_stance`` stance knots on ``[0, t_stance]``
and ``n_flight`` flight knots on ``[t_stance, t_stance + t_flight]``; the
first flight knot coincides in time with the take-off knot. Stance uses
trapezoidal transcription of the centroidal equations with all four feet on
fixed contact points; flight is ballistic. The body keeps its homing
orientation and zero angular momentum throughout.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from . import nlp
from .robot_model import (
    NUM_LEGS,
    RobotMorphology,
    feet_ik,
    leg_fk_local,
    leg_jacobian,
    leg_jacobian_derivative,
)

log = logging.getLogger(__name__)

GRAVITY = np.array([0.0, 0.0, -9.81])

POLYGON_PRESETS = {
    # width -12 cm (6 cm per side), rear feet 6 cm forward
    "narrow": np.array([[0.0, -0.06, 0.0], [0.0, 0.06, 0.0], [0.06, -0.06, 0.0], [0.06, 0.06, 0.0]]),
    # width +16 cm (8 cm per side), front feet 6 cm forward
    "wide": np.array([[0.06, 0.08, 0.0], [0.06, -0.08, 0.0], [0.0, 0.08, 0.0], [0.0, -0.08, 0.0]]),
    "homing": np.zeros((4, 3)),
}


class PlanFailed(RuntimeError):
    def __init__(self, message, solution: nlp.NlpSolution | None = None):
        super().__init__(message)
        self.solution = solution


class SingularPolygon(ValueError):
    pass


class CommandRejected(PlanFailed, ValueError):
    """Command outside the displacement sanity box; no solve is attempted."""


@dataclass
class JumpCommand:
    displacement: np.ndarray
    landing_polygon_offsets: np.ndarray = field(default_factory=lambda: np.zeros((4, 3)))

    def __post_init__(self):
        self.displacement = np.asarray(self.displacement, dtype=float).reshape(3)
        self.landing_polygon_offsets = np.asarray(self.landing_polygon_offsets, dtype=float).reshape(4, 3)

    def validate(self):
        dx, dy, dz = self.displacement
        if abs(dx) > 2.0 or abs(dy) > 2.0 or not -0.5 <= dz <= 0.5:
            raise CommandRejected(
                f"jump displacement {tuple(float(v) for v in self.displacement)} outside sanity box |dx|,|dy| <= 2 m, dz in [-0.5, 0.5] m"
            )


@dataclass
class CostWeights:
    force_rate: float = 1e-4
    force: float = 1e-5
    takeoff_velocity: float = 0.1
    flight_time: float = 0.1
    landing_velocity: float = 0.1
    total_time: float = 1.0
    joint_regularization: float = 0.5
    slack: float = 1e4

    def as_array(self):
        return np.array([
            self.force_rate, self.force, self.takeoff_velocity, self.flight_time,
            self.landing_velocity, self.total_time, self.joint_regularization, self.slack,
        ])


@dataclass
class ToConfig:
    weights: CostWeights = field(default_factory=CostWeights)
    mu: float = 0.6
    n_stance: int = 100
    n_flight: int = 100
    slack_tolerance: float = 0.05
    t_bounds: tuple = (0.1, 1.5)
    t_guess: tuple = (0.6, 0.4)
    solver: nlp.SolverOptions = field(default_factory=nlp.SolverOptions)

    @classmethod
    def from_dict(cls, d: dict) -> "ToConfig":
        d = dict(d)
        weights = CostWeights()
        w = d.pop("weights", None)
        if w is not None:
            if isinstance(w, dict):
                weights = replace(weights, **w)
            else:
                weights = CostWeights(*[float(v) for v in w])
        solver = nlp.SolverOptions(**d.pop("solver", {}))
        for k in ("t_bounds", "t_guess"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(weights=weights, solver=solver, **d)


@dataclass
class TrajectoryKnots:
    X: np.ndarray  # (6, N): CoM position and velocity
    Q: np.ndarray  # (12, n_stance)
    U: np.ndarray  # (12, n_stance): per-foot forces, 3 per foot
    t: np.ndarray  # (t_stance, t_flight)
    xi: np.ndarray  # (3,)
    contact_points: np.ndarray  # (4, 3)
    n_stance: int
    n_flight: int
    status: str = "Converged"
    kkt: dict = field(default_factory=dict)
    solve_time: float = 0.0
    iterations: int = 0
    command: JumpCommand | None = None

    n_c = NUM_LEGS

    @property
    def n_knots(self) -> int:
        return self.n_stance + self.n_flight

    @property
    def t_stance(self) -> float:
        return float(self.t[0])

    @property
    def t_flight(self) -> float:
        return float(self.t[1])

    @property
    def knot_times(self) -> np.ndarray:
        ts = np.linspace(0.0, self.t_stance, self.n_stance)
        tf = self.t_stance + np.linspace(0.0, self.t_flight, self.n_flight)
        return np.concatenate([ts, tf])

    @property
    def com(self) -> np.ndarray:
        return self.X[:3].T

    @property
    def com_velocity(self) -> np.ndarray:
        return self.X[3:].T

    @property
    def forces(self) -> np.ndarray:
        """(n_stance, 4, 3)."""
        return self.U.T.reshape(self.n_stance, NUM_LEGS, 3)

    @property
    def landing_com(self) -> np.ndarray:
        return self.X[:3, -1].copy()


# ---------------------------------------------------------------------------
# GRF distribution


def grasp_map(com, contacts) -> np.ndarray:
    """6x12 map from stacked foot forces to (net force, moment about com)."""
    contacts = np.asarray(contacts, dtype=float).reshape(-1, 3)
    p = contacts - np.asarray(com, dtype=float)
    blocks = [np.vstack([np.eye(3), _skew(pi)]) for pi in p]
    return np.hstack(blocks)


def distribute_grf(total_force, com, contacts) -> np.ndarray:
    """Minimum-norm foot forces with the given sum and zero moment about ``com``.

    Returns an array of shape (4, 3).
    """
    G = grasp_map(com, contacts)
    sv = np.linalg.svd(G, compute_uv=False)
    if sv[-1] < 1e-9 * sv[0]:
        raise SingularPolygon("contact polygon does not span the wrench space")
    w = np.concatenate([np.asarray(total_force, dtype=float).reshape(3), np.zeros(3)])
    f = G.T @ np.linalg.solve(G @ G.T, w)
    return f.reshape(-1, 3)


def _skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _minnorm_complement(contacts) -> np.ndarray:
    """Orthonormal basis (12, 6) of forces orthogonal to every min-norm split.

    Min-norm splits have the form f_i = a + b x c_i; that set does not depend
    on the CoM position, so this basis is fixed for a given polygon.
    """
    A = np.vstack([np.hstack([np.eye(3), -_skew(c)]) for c in contacts])
    u, s, _ = np.linalg.svd(A, full_matrices=True)
    return u[:, 6:]


# ---------------------------------------------------------------------------
# problem assembly


class _Layout:
    def __init__(self, n_stance, n_flight):
        self.ns = n_stance
        self.nf = n_flight
        self.n = n_stance + n_flight
        self.off_x = 0
        self.off_q = 6 * self.n
        self.off_u = self.off_q + 12 * n_stance
        self.off_t = self.off_u + 12 * n_stance
        self.off_xi = self.off_t + 2
        self.n_vars = self.off_xi + 3

    def x_idx(self, k, j):
        return self.off_x + 6 * np.asarray(k) + j

    def q_idx(self, k, j):
        return self.off_q + 12 * np.asarray(k) + j

    def u_idx(self, k, j):
        return self.off_u + 12 * np.asarray(k) + j

    def unpack(self, z):
        X = z[: self.off_q].reshape(self.n, 6)
        Q = z[self.off_q : self.off_u].reshape(self.ns, 12)
        U = z[self.off_u : self.off_t].reshape(self.ns, 12)
        t = z[self.off_t : self.off_xi]
        xi = z[self.off_xi :]
        return X, Q, U, t, xi

    def pack(self, X, Q, U, t, xi):
        return np.concatenate([np.ravel(X), np.ravel(Q), np.ravel(U), np.ravel(t), np.ravel(xi)])


class _SparseBlock:
    """Constraint Jacobian with a fixed sparsity pattern; data filled per call."""

    def __init__(self, m, n):
        self.m, self.n = m, n
        self.rows: list = []
        self.cols: list = []
        self._csr_index = None

    def add(self, rows, cols):
        rows, cols = np.broadcast_arrays(np.asarray(rows), np.asarray(cols))
        self.rows.append(rows.ravel())
        self.cols.append(cols.ravel())

    def finalize(self):
        self.r = np.concatenate(self.rows) if self.rows else np.zeros(0, int)
        self.c = np.concatenate(self.cols) if self.cols else np.zeros(0, int)
        return self

    def build(self, data):
        data = np.concatenate([np.ravel(d) for d in data]) if data else np.zeros(0)
        return sp.csr_matrix((data, (self.r, self.c)), shape=(self.m, self.n))


class JumpProblem:
    """Kino-dynamic jump NLP for one command; exposes the generic ``NlpProblem``."""

    def __init__(self, cmd: JumpCommand, morph: RobotMorphology, cfg: ToConfig):
        cmd.validate()
        self.cmd = cmd
        self.morph = morph
        self.cfg = cfg
        self.L = _Layout(cfg.n_stance, cfg.n_flight)
        ns, nf = cfg.n_stance, cfg.n_flight
        self.hips = morph.hip_positions
        self.contacts = np.column_stack([self.hips[:, :2], np.zeros(4)])
        self.r0 = np.array([0.0, 0.0, morph.homing_height])
        self.target = self.r0 + cmd.displacement
        self.q_home = morph.homing_joints
        self.w = cfg.weights.as_array()
        self.null_basis = _minnorm_complement(self.contacts)
        self._build_patterns()
        self.problem = nlp.NlpProblem(
            n_vars=self.L.n_vars,
            objective=self.objective,
            gradient=self.gradient,
            constraints=self._constraints(),
            lower=self._lower(),
            upper=self._upper(),
            x_scale=self._scale(),
            sparsity={name: blk.r.size for name, blk in self._blocks.items()},
            hessian=self.hessian,
        )

    # -- bounds and scaling --------------------------------------------------

    def _lower(self):
        L, m = self.L, self.morph
        X = np.tile([-np.inf, -np.inf, 0.05, -np.inf, -np.inf, -np.inf], (L.n, 1))
        Q = np.tile(m.joint_lower, (L.ns, 1))
        U = np.tile([-np.inf, -np.inf, 0.0], (L.ns, 4))
        if self.cfg.mu == 0:
            U = np.tile([0.0, 0.0, 0.0], (L.ns, 4))
        t = np.full(2, self.cfg.t_bounds[0])
        return L.pack(X, Q, U, t, np.full(3, -np.inf))

    def _upper(self):
        L, m = self.L, self.morph
        X = np.full((L.n, 6), np.inf)
        Q = np.tile(m.joint_upper, (L.ns, 1))
        U = np.full((L.ns, 12), np.inf)
        if self.cfg.mu == 0:
            U = np.tile([0.0, 0.0, np.inf], (L.ns, 4))
        t = np.full(2, self.cfg.t_bounds[1])
        return L.pack(X, Q, U, t, np.full(3, np.inf))

    def _scale(self):
        L = self.L
        X = np.tile([0.1, 0.1, 0.1, 1.0, 1.0, 1.0], (L.n, 1))
        Q = np.full((L.ns, 12), 0.3)
        U = np.full((L.ns, 12), 30.0)
        return L.pack(X, Q, U, np.full(2, 0.1), np.full(3, 0.01))

    # -- cost ----------------------------------------------------------------

    def cost_terms(self, z) -> dict[str, float]:
        return assemble_cost_terms(self.L.unpack(z), self.q_home, self.w, self.L.ns)

    def objective(self, z):
        return float(sum(self.cost_terms(z).values()))

    def gradient(self, z):
        L, w = self.L, self.w
        X, Q, U, t, xi = L.unpack(z)
        gX = np.zeros_like(X)
        gU = np.zeros_like(U)
        dU = np.diff(U, axis=0)
        gU[1:] += 2 * w[0] * dU
        gU[:-1] -= 2 * w[0] * dU
        gU += 2 * w[1] * U
        gX[L.ns - 1, 3:] += 2 * w[2] * X[L.ns - 1, 3:]
        gX[-1, 3:] += 2 * w[4] * X[-1, 3:]
        gt = np.array([w[5], w[5] + 2 * w[3] * t[1]])
        gQ = 2 * w[6] * (Q - self.q_home)
        gxi = 2 * w[7] * xi
        return L.pack(gX, gQ, gU, gt, gxi)

    # -- constraints -----------------------------------------------------------

    def _build_patterns(self):
        L = self.L
        ns, nf, n = L.ns, L.nf, L.n
        N = L.n_vars
        blocks = {}

        # stance dynamics: 6 rows per pair
        kp = np.arange(ns - 1)
        b = _SparseBlock(6 * (ns - 1), N)
        rows_p = 6 * kp[:, None] + np.arange(3)
        rows_v = rows_p + 3
        for j in range(3):
            # position rows: r_{k+1}, r_k, v_k, v_{k+1}, t_s
            b.add(rows_p[:, j], L.x_idx(kp + 1, j))
            b.add(rows_p[:, j], L.x_idx(kp, j))
            b.add(rows_p[:, j], L.x_idx(kp, 3 + j))
            b.add(rows_p[:, j], L.x_idx(kp + 1, 3 + j))
            b.add(rows_p[:, j], L.off_t)
        for j in range(3):
            b.add(rows_v[:, j], L.x_idx(kp + 1, 3 + j))
            b.add(rows_v[:, j], L.x_idx(kp, 3 + j))
            b.add(rows_v[:, j], L.off_t)
            for i in range(4):
                b.add(rows_v[:, j], L.u_idx(kp, 3 * i + j))
                b.add(rows_v[:, j], L.u_idx(kp + 1, 3 * i + j))
        blocks["stance_dynamics"] = b.finalize()

        # flight dynamics
        kf = np.arange(ns, n - 1)
        b = _SparseBlock(6 * (nf - 1), N)
        rf = np.arange(nf - 1)
        rows_p = 6 * rf[:, None] + np.arange(3)
        for j in range(3):
            b.add(rows_p[:, j], L.x_idx(kf + 1, j))
            b.add(rows_p[:, j], L.x_idx(kf, j))
            b.add(rows_p[:, j], L.x_idx(kf, 3 + j))
            b.add(rows_p[:, j], L.off_t + 1)
        for j in range(3):
            b.add(rows_p[:, j] + 3, L.x_idx(kf + 1, 3 + j))
            b.add(rows_p[:, j] + 3, L.x_idx(kf, 3 + j))
            b.add(rows_p[:, j] + 3, L.off_t + 1)
        blocks["flight_dynamics"] = b.finalize()

        # single-knot: initial state (6), take-off continuity (6), landing (3)
        b = _SparseBlock(15, N)
        b.add(np.arange(6), L.x_idx(0, np.arange(6)))
        b.add(6 + np.arange(6), L.x_idx(ns, np.arange(6)))
        b.add(6 + np.arange(6), L.x_idx(ns - 1, np.arange(6)))
        b.add(12 + np.arange(3), L.x_idx(n - 1, np.arange(3)))
        b.add(12 + np.arange(3), L.off_xi + np.arange(3))
        blocks["single_knot"] = b.finalize()

        # kinematics: 12 rows per stance knot
        k = np.arange(ns)
        b = _SparseBlock(12 * ns, N)
        for i in range(4):
            for a in range(3):
                row = 12 * k + 3 * i + a
                for jj in range(3):
                    b.add(row, L.q_idx(k, 3 * i + jj))
                b.add(row, L.x_idx(k, a))
        blocks["kinematics"] = b.finalize()

        # GRF: 3 moment rows + 6 null-space rows per stance knot
        b = _SparseBlock(9 * ns, N)
        for a in range(3):
            row = 9 * k + a
            for jj in range(12):
                b.add(row, L.u_idx(k, jj))
            for c in range(3):
                b.add(row, L.x_idx(k, c))
        for r in range(6):
            row = 9 * k + 3 + r
            for jj in range(12):
                b.add(row, L.u_idx(k, jj))
        blocks["grf_distribution"] = b.finalize()

        # friction pyramid: 4 rows per foot per knot
        b = _SparseBlock(16 * ns, N)
        for i in range(4):
            for s_ in range(4):
                row = 16 * k + 4 * i + s_
                b.add(row, L.u_idx(k, 3 * i + s_ // 2))
                b.add(row, L.u_idx(k, 3 * i + 2))
        blocks["friction"] = b.finalize()

        # torque limits: 24 rows per knot (12 upper, 12 lower)
        b = _SparseBlock(24 * ns, N)
        for sign_off in (0, 12):
            for i in range(4):
                for jj in range(3):
                    row = 24 * k + sign_off + 3 * i + jj
                    for l in range(3):
                        b.add(row, L.q_idx(k, 3 * i + l))
                    for a in range(3):
                        b.add(row, L.u_idx(k, 3 * i + a))
        blocks["torque"] = b.finalize()
        self._blocks = blocks

    def _constraints(self):
        kinds = {"friction": "ineq", "torque": "ineq"}
        out = []
        for name in self._blocks:
            fun = getattr(self, f"_c_{name}")
            jac = getattr(self, f"_j_{name}")
            out.append(nlp.Constraint(name, fun, jac, kinds.get(name, "eq")))
        return out

    def _hs(self, t):
        return t[0] / (self.L.ns - 1), t[1] / (self.L.nf - 1)

    def _accel(self, U):
        return U.reshape(-1, 4, 3).sum(axis=1) / self.morph.mass + GRAVITY

    # Dynamics defects are multiplied by (n - 1), i.e. measured per unit of
    # normalized phase time, so they weigh in like the other constraints.

    def _c_stance_dynamics(self, z):
        X, Q, U, t, xi = self.L.unpack(z)
        ns = self.L.ns
        hs, _ = self._hs(t)
        r, v = X[:ns, :3], X[:ns, 3:]
        a = self._accel(U)
        rp = r[1:] - r[:-1] - 0.5 * hs * (v[:-1] + v[1:])
        rv = v[1:] - v[:-1] - 0.5 * hs * (a[:-1] + a[1:])
        return (ns - 1) * np.hstack([rp, rv]).ravel()

    def _j_stance_dynamics(self, z):
        X, Q, U, t, xi = self.L.unpack(z)
        ns = self.L.ns
        hs, _ = self._hs(t)
        v = X[:ns, 3:]
        a = self._accel(U)
        m = ns - 1
        one = np.ones(m)
        data = []
        for j in range(3):
            data += [one, -one, -0.5 * hs * one, -0.5 * hs * one, -(v[:-1, j] + v[1:, j]) / (2 * (ns - 1))]
        g = -0.5 * hs / self.morph.mass
        for j in range(3):
            data += [one, -one, -(a[:-1, j] + a[1:, j]) / (2 * (ns - 1))]
            for i in range(4):
                data += [g * one, g * one]
        return (ns - 1) * self._blocks["stance_dynamics"].build(data)

    def _c_flight_dynamics(self, z):
        X, Q, U, t, xi = self.L.unpack(z)
        ns = self.L.ns
        _, hf = self._hs(t)
        r, v = X[ns:, :3], X[ns:, 3:]
        rp = r[1:] - r[:-1] - hf * v[:-1] - 0.5 * GRAVITY * hf**2
        rv = v[1:] - v[:-1] - GRAVITY * hf
        return (self.L.nf - 1) * np.hstack([rp, rv]).ravel()

    def _j_flight_dynamics(self, z):
        X, Q, U, t, xi = self.L.unpack(z)
        ns, nf = self.L.ns, self.L.nf
        _, hf = self._hs(t)
        v = X[ns:, 3:]
        m = nf - 1
        one = np.ones(m)
        data = []
        for j in range(3):
            data += [one, -one, -hf * one, -(v[:-1, j] + GRAVITY[j] * hf) / (nf - 1)]
        for j in range(3):
            data += [one, -one, -GRAVITY[j] / (nf - 1) * one]
        return (nf - 1) * self._blocks["flight_dynamics"].build(data)

    def _c_single_knot(self, z):
        X, Q, U, t, xi = self.L.unpack(z)
        ns = self.L.ns
        init = X[0] - np.concatenate([self.r0, np.zeros(3)])
        takeoff = X[ns] - X[ns - 1]
        land = X[-1, :3] - self.target - xi
        return np.concatenate([init, takeoff, land])

    def _j_single_knot(self, z):
        return self._blocks["single_knot"].build([np.ones(6), np.ones(6), -np.ones(6), np.ones(3), -np.ones(3)])

    def _c_kinematics(self, z):
        X, Q, U, t, xi = self.L.unpack(z)
        ns = self.L.ns
        r = X[:ns, :3]
        q = Q.reshape(ns, 4, 3)
        res = np.empty((ns, 4, 3))
        for i in range(4):
            foot = self.hips[i] + leg_fk_local(q[:, i], i, self.morph)
            res[:, i] = foot - (self.contacts[i] - r)
        return res.ravel()

    def _j_kinematics(self, z):
        X, Q, U, t, xi = self.L.unpack(z)
        ns = self.L.ns
        q = Q.reshape(ns, 4, 3)
        data = []
        one = np.ones(ns)
        for i in range(4):
            J = leg_jacobian(q[:, i], i, self.morph)
            for a in range(3):
                data += [J[:, a, 0], J[:, a, 1], J[:, a, 2], one]
        return self._blocks["kinematics"].build(data)

    def _c_grf_distribution(self, z):
        X, Q, U, t, xi = self.L.unpack(z)
        ns = self.L.ns
        r = X[:ns, :3]
        f = U.reshape(ns, 4, 3)
        p = self.contacts[None] - r[:, None]
        moment = np.cross(p, f).sum(axis=1)
        null = U @ self.null_basis
        return np.hstack([moment, null]).ravel()

    def _j_grf_distribution(self, z):
        X, Q, U, t, xi = self.L.unpack(z)
        ns = self.L.ns
        r = X[:ns, :3]
        f = U.reshape(ns, 4, 3)
        p = self.contacts[None] - r[:, None]  # (ns, 4, 3)
        # d(p x f)/df = skew(p); d/dr = skew(f)
        sk_p = _skew_batch(p)  # (ns, 4, 3, 3)
        sk_f = _skew_batch(f).sum(axis=1)  # (ns, 3, 3)
        data = []
        for a in range(3):
            for jj in range(12):
                data.append(sk_p[:, jj // 3, a, jj % 3])
            for c in range(3):
                data.append(sk_f[:, a, c])
        one = np.ones(ns)
        for r_ in range(6):
            for jj in range(12):
                data.append(self.null_basis[jj, r_] * one)
        return self._blocks["grf_distribution"].build(data)

    def _c_friction(self, z):
        X, Q, U, t, xi = self.L.unpack(z)
        f = U.reshape(-1, 4, 3)
        mu = self.cfg.mu
        fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
        return np.stack([fx - mu * fz, -fx - mu * fz, fy - mu * fz, -fy - mu * fz], axis=-1).ravel()

    def _j_friction(self, z):
        ns = self.L.ns
        mu = self.cfg.mu
        one = np.ones(ns)
        data = []
        for i in range(4):
            for s_ in range(4):
                data += [(1.0 if s_ % 2 == 0 else -1.0) * one, -mu * one]
        return self._blocks["friction"].build(data)

    def joint_torques(self, z) -> np.ndarray:
        """Stance joint torques (ns, 4, 3) that realize the planned forces."""
        X, Q, U, t, xi = self.L.unpack(z)
        ns = self.L.ns
        q = Q.reshape(ns, 4, 3)
        f = U.reshape(ns, 4, 3)
        tau = np.empty((ns, 4, 3))
        for i in range(4):
            J = leg_jacobian(q[:, i], i, self.morph)
            tau[:, i] = -np.einsum("kaj,ka->kj", J, f[:, i])
        return tau

    def _c_torque(self, z):
        tau = self.joint_torques(z).reshape(-1, 12)
        lim = self.morph.torque_limit
        return np.hstack([tau - lim, -tau - lim]).ravel()

    def _j_torque(self, z):
        X, Q, U, t, xi = self.L.unpack(z)
        ns = self.L.ns
        q = Q.reshape(ns, 4, 3)
        f = U.reshape(ns, 4, 3)
        dq = np.empty((ns, 4, 3, 3))
        df = np.empty((ns, 4, 3, 3))
        for i in range(4):
            J = leg_jacobian(q[:, i], i, self.morph)
            H = leg_jacobian_derivative(q[:, i], i, self.morph)  # (ns, a, j, l)
            dq[:, i] = -np.einsum("kajl,ka->kjl", H, f[:, i])
            df[:, i] = -np.transpose(J, (0, 2, 1))
        data = []
        for sign in (1.0, -1.0):
            for i in range(4):
                for jj in range(3):
                    for l in range(3):
                        data.append(sign * dq[:, i, jj, l])
                    for a in range(3):
                        data.append(sign * df[:, i, jj, a])
        return self._blocks["torque"].build(data)

    # -- Lagrangian Hessian ----------------------------------------------------

    def hessian(self, z, mults: dict) -> sp.csr_matrix:
        """grad^2 f + sum of multiplier-weighted constraint Hessians."""
        L, w = self.L, self.w
        ns, nf = L.ns, L.nf
        X, Q, U, t, xi = L.unpack(z)
        rows, cols, vals = [], [], []

        def add(r, c, v, sym=False):
            r, c, v = np.broadcast_arrays(np.asarray(r), np.asarray(c), np.asarray(v, dtype=float))
            rows.append(r.ravel())
            cols.append(c.ravel())
            vals.append(v.ravel())
            if sym:
                rows.append(c.ravel())
                cols.append(r.ravel())
                vals.append(v.ravel())

        # objective
        k = np.arange(ns)
        lap = np.full(ns, 2.0)
        lap[[0, -1]] = 1.0
        for j in range(12):
            add(L.u_idx(k, j), L.u_idx(k, j), 2 * w[0] * lap + 2 * w[1])
            add(L.u_idx(k[:-1], j), L.u_idx(k[1:], j), -2 * w[0], sym=True)
        add(L.x_idx(ns - 1, np.arange(3, 6)), L.x_idx(ns - 1, np.arange(3, 6)), 2 * w[2])
        add(L.x_idx(L.n - 1, np.arange(3, 6)), L.x_idx(L.n - 1, np.arange(3, 6)), 2 * w[4])
        add(L.off_t + 1, L.off_t + 1, 2 * w[3])
        qi = L.off_q + np.arange(12 * ns)
        add(qi, qi, 2 * w[6])
        add(L.off_xi + np.arange(3), L.off_xi + np.arange(3), 2 * w[7])

        # stance dynamics: bilinear in t_s and (v, f)
        y = mults.get("stance_dynamics")
        if y is not None:
            y = (ns - 1) * y.reshape(ns - 1, 6)
            kp = np.arange(ns - 1)
            cv = -1.0 / (2 * (ns - 1))
            cf = cv / self.morph.mass
            for j in range(3):
                add(L.off_t, L.x_idx(kp, 3 + j), cv * y[:, j], sym=True)
                add(L.off_t, L.x_idx(kp + 1, 3 + j), cv * y[:, j], sym=True)
                for i in range(4):
                    add(L.off_t, L.u_idx(kp, 3 * i + j), cf * y[:, 3 + j], sym=True)
                    add(L.off_t, L.u_idx(kp + 1, 3 * i + j), cf * y[:, 3 + j], sym=True)

        y = mults.get("flight_dynamics")
        if y is not None:
            y = (nf - 1) * y.reshape(nf - 1, 6)
            kf = np.arange(ns, L.n - 1)
            for j in range(3):
                add(L.off_t + 1, L.x_idx(kf, 3 + j), -y[:, j] / (nf - 1), sym=True)
            add(L.off_t + 1, L.off_t + 1, -np.sum(y[:, :3] @ GRAVITY) / (nf - 1) ** 2)

        q = Q.reshape(ns, 4, 3)
        f = U.reshape(ns, 4, 3)
        y_kin = mults.get("kinematics")
        y_tau = mults.get("torque")
        if y_tau is not None:
            y_tau = y_tau.reshape(ns, 2, 4, 3)
            y_tau = y_tau[:, 0] - y_tau[:, 1]
        ii, jj = np.meshgrid(np.arange(3), np.arange(3), indexing="ij")
        kk = k[:, None, None]
        for i in range(4):
            H = leg_jacobian_derivative(q[:, i], i, self.morph)  # (ns, a, j, l)
            hqq = np.zeros((ns, 3, 3))
            if y_kin is not None:
                hqq += np.einsum("ka,kajl->kjl", y_kin.reshape(ns, 4, 3)[:, i], H)
            if y_tau is not None:
                yt = y_tau[:, i]
                T = _fk_third(q[:, i], i, self.morph)  # (ns, a, j, l, m)
                hqq -= np.einsum("kj,ka,kajlm->klm", yt, f[:, i], T)
                hqf = -np.einsum("kj,kajl->kla", yt, H)  # rows q_l, cols f_a
                add(L.q_idx(kk, 3 * i + ii), L.u_idx(kk, 3 * i + jj), hqf, sym=True)
            add(L.q_idx(kk, 3 * i + ii), L.q_idx(kk, 3 * i + jj), hqq)

        y = mults.get("grf_distribution")
        if y is not None:
            sk = _skew_batch(y.reshape(ns, 9)[:, :3])  # d^2/dr df_i, same for every foot
            for i in range(4):
                add(L.x_idx(kk, ii), L.u_idx(kk, 3 * i + jj), sk, sym=True)

        H = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(L.n_vars, L.n_vars)
        )
        return H.tocsr()

    # -- initial guess -------------------------------------------------------

    def initial_guess(self) -> np.ndarray:
        L, m = self.L, self.morph
        ts, tf = self.cfg.t_guess
        T = ts + tf
        times = np.concatenate([np.linspace(0, ts, L.ns), ts + np.linspace(0, tf, L.nf)])
        u = times / T
        r = self.r0 + np.outer(u, self.target - self.r0)
        bump = 0.1 * 4 * u * (1 - u)
        r[:, 2] += bump
        v = np.tile((self.target - self.r0) / T, (L.n, 1))
        v[:, 2] += 0.1 * 4 * (1 - 2 * u) / T
        X = np.hstack([r, v])
        Q = np.tile(self.q_home, (L.ns, 1))
        U = np.tile([0.0, 0.0, m.mass * 9.81 / 4], (L.ns, 4))
        return L.pack(X, Q, U, np.array([ts, tf]), np.zeros(3))


def _fk_third(q, leg_index, morph, step=1e-5):
    """Third derivatives of the foot position (..., a, j, l, m) by central differences of the Hessian."""
    out = []
    for m in range(3):
        e = np.zeros(3)
        e[m] = step
        hp = leg_jacobian_derivative(q + e, leg_index, morph)
        hm = leg_jacobian_derivative(q - e, leg_index, morph)
        out.append((hp - hm) / (2 * step))
    return np.stack(out, axis=-1)


def _skew_batch(v):
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    zero = np.zeros_like(x)
    return np.stack(
        [np.stack([zero, -z, y], -1), np.stack([z, zero, -x], -1), np.stack([-y, x, zero], -1)], axis=-2
    )


def assemble_cost_terms(view, q_home, weights, n_stance) -> dict[str, float]:
    """Cost decomposition for an unpacked decision vector ``(X, Q, U, t, xi)``.

    ``X`` is knot-major (N, 6); ``Q`` and ``U`` are (n_stance, 12).
    """
    X, Q, U, t, xi = view
    w = weights
    dU = np.diff(U, axis=0)
    return {
        "stance": float(w[0] * np.sum(dU**2) + w[1] * np.sum(U**2)),
        "takeoff": float(w[2] * np.sum(X[n_stance - 1, 3:] ** 2)),
        "flight": float(w[3] * t[1] ** 2),
        "land": float(w[4] * np.sum(X[-1, 3:] ** 2)),
        "time": float(w[5] * (t[0] + t[1])),
        "joints": float(w[6] * np.sum((Q - q_home) ** 2)),
        "slack": float(w[7] * np.sum(xi**2)),
    }


def assemble_cost(view, q_home, weights, n_stance) -> float:
    return float(sum(assemble_cost_terms(view, q_home, weights, n_stance).values()))


def build_problem(cmd: JumpCommand, morph: RobotMorphology, to_config: ToConfig | None = None) -> JumpProblem:
    return JumpProblem(cmd, morph, to_config or ToConfig())


def solve_jump(cmd: JumpCommand, morph: RobotMorphology, to_config: ToConfig | None = None) -> TrajectoryKnots:
    """Solve the jump NLP; raises ``PlanFailed`` unless converged with small slack."""
    cfg = to_config or ToConfig()
    jp = build_problem(cmd, morph, cfg)
    t0 = time.perf_counter()
    sol = nlp.solve(jp.problem, jp.initial_guess(), cfg.solver)
    elapsed = time.perf_counter() - t0
    log.info("jump solve %s in %.1f s (%d outer)", sol.status.value, elapsed, sol.iterations)
    if not sol.converged:
        raise PlanFailed(f"trajectory optimization ended with status {sol.status.value}", sol)
    knots = _to_knots(jp, sol, elapsed)
    slack = float(np.linalg.norm(knots.xi))
    if slack > cfg.slack_tolerance:
        raise PlanFailed(f"landing slack {slack:.3f} m exceeds tolerance {cfg.slack_tolerance} m", sol)
    return knots


def _to_knots(jp: JumpProblem, sol: nlp.NlpSolution, elapsed: float) -> TrajectoryKnots:
    L = jp.L
    X, Q, U, t, xi = (a.copy() for a in L.unpack(sol.x_opt))
    # closed-form ballistic flight from the take-off state
    hf = t[1] / (L.nf - 1)
    tau = hf * np.arange(L.nf)[:, None]
    r_to, v_to = X[L.ns - 1, :3], X[L.ns - 1, 3:]
    X[L.ns :, :3] = r_to + v_to * tau + 0.5 * GRAVITY * tau**2
    X[L.ns :, 3:] = v_to + GRAVITY * tau
    xi = X[-1, :3] - jp.target
    k = sol.kkt_residuals
    return TrajectoryKnots(
        X=X.T.copy(),
        Q=Q.T.copy(),
        U=U.T.copy(),
        t=t,
        xi=xi,
        contact_points=jp.contacts.copy(),
        n_stance=L.ns,
        n_flight=L.nf,
        status=sol.status.value,
        kkt={"stationarity": k.stationarity, "feasibility": k.feasibility, "complementarity": k.complementarity},
        solve_time=elapsed,
        iterations=sol.iterations,
        command=jp.cmd,
    )


def reshape_flight_joints(knots: TrajectoryKnots, cmd: JumpCommand, morph: RobotMorphology, hold: int = 1) -> np.ndarray:
    """Joint reference over flight plus ``hold`` samples of the landing pose.

    Interpolates with a smoothstep from the take-off joints to the IK of the
    (reshaped) homing feet polygon. Returns shape (12, n_flight + hold).
    """
    feet = morph.homing_feet + np.asarray(cmd.landing_polygon_offsets, dtype=float).reshape(4, 3)
    q_land = feet_ik(feet, morph)
    q_to = knots.Q[:, -1]
    u = np.linspace(0.0, 1.0, knots.n_flight)
    s = 3 * u**2 - 2 * u**3
    flight = q_to[:, None] + (q_land - q_to)[:, None] * s[None, :]
    flight[:, -1] = q_land
    return np.hstack([flight, np.tile(q_land[:, None], (1, hold))])


def landing_polygon(cmd: JumpCommand, morph: RobotMorphology) -> np.ndarray:
    """Landing foot positions (4, 3) in the body frame."""
    return morph.homing_feet + cmd.landing_polygon_offsets


def polygon_extent(feet) -> dict[str, float]:
    """Width (left-right spread) and per-end x positions of a feet polygon."""
    feet = np.asarray(feet)
    return {
        "front_width": float(feet[0, 1] - feet[1, 1]),
        "rear_width": float(feet[2, 1] - feet[3, 1]),
        "front_x": float(0.5 * (feet[0, 0] + feet[1, 0])),
        "rear_x": float(0.5 * (feet[2, 0] + feet[3, 0])),
    }


def check_knots(knots: TrajectoryKnots, morph: RobotMorphology, mu: float) -> dict[str, float]:
    """Post-hoc residuals of a solved trajectory (independent of the NLP code)."""
    ns, nf = knots.n_stance, knots.n_flight
    r, v = knots.com, knots.com_velocity
    hs = knots.t_stance / (ns - 1)
    hf = knots.t_flight / (nf - 1)
    f = knots.forces
    a = f.sum(axis=1) / morph.mass + GRAVITY
    dyn_p = r[1:ns] - r[: ns - 1] - 0.5 * hs * (v[: ns - 1] + v[1:ns])
    dyn_v = v[1:ns] - v[: ns - 1] - 0.5 * hs * (a[:-1] + a[1:])
    fl_p = r[ns + 1 :] - r[ns:-1] - hf * v[ns:-1] - 0.5 * GRAVITY * hf**2
    fl_v = v[ns + 1 :] - v[ns:-1] - GRAVITY * hf
    q = knots.Q.T.reshape(ns, 4, 3)
    taus = []
    kin = []
    for i in range(4):
        J = leg_jacobian(q[:, i], i, morph)
        taus.append(np.einsum("kaj,ka->kj", J, f[:, i]))
        foot = morph.hip_positions[i] + leg_fk_local(q[:, i], i, morph)
        kin.append(foot - (knots.contact_points[i] - r[:ns]))
    tau = np.abs(np.stack(taus))
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
    friction = np.maximum(np.abs(fx) - mu * fz, np.abs(fy) - mu * fz)
    grf_err = 0.0
    for k in range(ns):
        split = distribute_grf(f[k].sum(axis=0), r[k], knots.contact_points)
        grf_err = max(grf_err, float(np.max(np.abs(split - f[k]))))
    return {
        "stance_dynamics": float(max(np.max(np.abs(dyn_p)), np.max(np.abs(dyn_v)))),
        "flight_ballistic": float(max(np.max(np.abs(fl_p)), np.max(np.abs(fl_v)))),
        "kinematics": float(np.max(np.abs(np.stack(kin)))),
        "max_torque": float(np.max(tau)),
        "friction_violation": float(np.max(friction)),
        "min_fz": float(np.min(fz)),
        "grf_split": grf_err,
    }
