"""Bound-constrained augmented Lagrangian solver for sparse NLPs.

Problems have the form::

    minimize    f(x)
    subject to  c_eq(x)  = 0
                c_in(x) <= 0
                lower <= x <= upper

The outer loop is a Powell-Hestenes-Rockafellar augmented Lagrangian with
multiplier projection for inequalities. Each subproblem is minimized over the
box either by a projected Newton method (when the problem supplies a
Lagrangian Hessian) or by L-BFGS-B.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
import scipy.optimize
import scipy.sparse as sp
from scipy.sparse.csgraph import reverse_cuthill_mckee

log = logging.getLogger(__name__)


class SolveStatus(str, enum.Enum):
    CONVERGED = "Converged"
    MAX_ITERATIONS = "MaxIterations"
    INFEASIBLE = "Infeasible"
    NUMERICAL_FAILURE = "NumericalFailure"


@dataclass
class Constraint:
    """A block of constraints. ``kind`` is ``"eq"`` or ``"ineq"`` (``<= 0``)."""

    name: str
    fun: Callable[[np.ndarray], np.ndarray]
    jac: Callable[[np.ndarray], sp.spmatrix | np.ndarray]
    kind: str = "eq"

    def __post_init__(self):
        if self.kind not in ("eq", "ineq"):
            raise ValueError(f"constraint kind must be 'eq' or 'ineq', got {self.kind!r}")


@dataclass
class NlpProblem:
    n_vars: int
    objective: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    constraints: list[Constraint] = field(default_factory=list)
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    # typical magnitude of each variable; the solver iterates on x / x_scale
    x_scale: np.ndarray | None = None
    sparsity: dict = field(default_factory=dict)
    # optional Lagrangian Hessian: hessian(x, multipliers_by_block) -> (n, n) sparse,
    # i.e. grad^2 f + sum_i y_i grad^2 c_i; enables the Newton inner solver
    hessian: Callable[[np.ndarray, dict], sp.spmatrix] | None = None

    def __post_init__(self):
        n = self.n_vars
        self.lower = np.full(n, -np.inf) if self.lower is None else np.asarray(self.lower, dtype=float)
        self.upper = np.full(n, np.inf) if self.upper is None else np.asarray(self.upper, dtype=float)
        if self.lower.shape != (n,) or self.upper.shape != (n,):
            raise ValueError("bounds must have shape (n_vars,)")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")
        self.x_scale = np.ones(n) if self.x_scale is None else np.asarray(self.x_scale, dtype=float)

    @property
    def equalities(self) -> list[Constraint]:
        return [c for c in self.constraints if c.kind == "eq"]

    @property
    def inequalities(self) -> list[Constraint]:
        return [c for c in self.constraints if c.kind == "ineq"]


@dataclass
class KktResiduals:
    stationarity: float
    feasibility: float
    complementarity: float

    def max(self) -> float:
        return max(self.stationarity, self.feasibility, self.complementarity)


@dataclass
class SolverOptions:
    tol_feas: float = 1e-6
    tol_stat: float = 1e-4
    max_iter: int = 50
    max_inner_iter: int = 200
    penalty0: float = 10.0
    penalty_growth: float = 10.0
    penalty_max: float = 1e9
    # violation must shrink by this factor per outer iteration or the penalty grows
    violation_ratio: float = 0.25
    # "auto" picks Newton when the problem has a Hessian, else L-BFGS-B
    inner: str = "auto"
    lbfgs_memory: int = 30
    trace_path: str | None = None


@dataclass
class OuterRecord:
    iteration: int
    objective: float
    feasibility: float
    stationarity: float
    penalty: float
    merit_start: float
    merit_end: float
    inner_iterations: int


@dataclass
class NlpSolution:
    x_opt: np.ndarray
    objective_value: float
    status: SolveStatus
    kkt_residuals: KktResiduals
    iterations: int
    multipliers: dict[str, np.ndarray] = field(default_factory=dict)
    trace: list[OuterRecord] = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status is SolveStatus.CONVERGED


class _NonFinite(FloatingPointError):
    pass


def _as_sparse(j, m, n) -> sp.csr_matrix:
    if sp.issparse(j):
        return j.tocsr()
    return sp.csr_matrix(np.asarray(j, dtype=float).reshape(m, n))


class _AugmentedLagrangian:
    """Evaluates the augmented Lagrangian of a problem in scaled variables y = x / x_scale."""

    def __init__(self, problem: NlpProblem):
        self.p = problem
        self.s = problem.x_scale
        self.eq = problem.equalities
        self.ineq = problem.inequalities
        self.n_evals = 0

    def sizes(self, x):
        return (
            [np.atleast_1d(c.fun(x)).size for c in self.eq],
            [np.atleast_1d(c.fun(x)).size for c in self.ineq],
        )

    def _stack(self, blocks, x):
        if not blocks:
            return np.zeros(0)
        return np.concatenate([np.atleast_1d(np.asarray(c.fun(x), dtype=float)).ravel() for c in blocks])

    def _stack_jac(self, blocks, x, sizes):
        n = self.p.n_vars
        if not blocks:
            return sp.csr_matrix((0, n))
        return sp.vstack([_as_sparse(c.jac(x), m, n) for c, m in zip(blocks, sizes)], format="csr")

    def constraints(self, x):
        ce = self._stack(self.eq, x)
        ci = self._stack(self.ineq, x)
        if not (np.all(np.isfinite(ce)) and np.all(np.isfinite(ci))):
            raise _NonFinite("non-finite constraint value")
        return ce, ci

    def jacobians(self, x, sizes):
        return self._stack_jac(self.eq, x, sizes[0]), self._stack_jac(self.ineq, x, sizes[1])

    def objective(self, x):
        f = float(self.p.objective(x))
        if not math.isfinite(f):
            raise _NonFinite("non-finite objective")
        return f

    def gradient(self, x):
        g = np.asarray(self.p.gradient(x), dtype=float)
        if not np.all(np.isfinite(g)):
            raise _NonFinite("non-finite gradient")
        return g

    def value(self, y, lam, mu, rho):
        x = y * self.s
        self.n_evals += 1
        f = self.objective(x)
        ce, ci = self.constraints(x)
        shifted = np.maximum(0.0, mu + rho * ci)
        return f + lam @ ce + 0.5 * rho * ce @ ce + (shifted @ shifted - mu @ mu) / (2.0 * rho)

    def value_and_grad(self, y, lam, mu, rho, sizes):
        x = y * self.s
        val = self.value(y, lam, mu, rho)
        ce, ci = self.constraints(x)
        shifted = np.maximum(0.0, mu + rho * ci)
        je, ji = self.jacobians(x, sizes)
        grad = self.gradient(x) + je.T @ (lam + rho * ce) + ji.T @ shifted
        return val, grad * self.s

    def split(self, vec, blocks, sizes):
        out, off = {}, 0
        for c, m in zip(blocks, sizes):
            out[c.name] = vec[off : off + m]
            off += m
        return out

    def hessian(self, y, lam, mu, rho, sizes):
        """Hessian of the augmented Lagrangian in scaled variables."""
        x = y * self.s
        ce, ci = self.constraints(x)
        je, ji = self.jacobians(x, sizes)
        y_eq = lam + rho * ce
        shifted = mu + rho * ci
        active = shifted > 0
        y_in = np.where(active, shifted, 0.0)
        mults = self.split(y_eq, self.eq, sizes[0])
        mults.update(self.split(y_in, self.ineq, sizes[1]))
        H = sp.csr_matrix(self.p.hessian(x, mults))
        H = H + rho * (je.T @ je)
        if ji.shape[0] and np.any(active):
            ja = ji[np.flatnonzero(active)]
            H = H + rho * (ja.T @ ja)
        S = sp.diags(self.s)
        return (S @ H @ S).tocsc()


def _projected_step(y, grad, lower, upper):
    return y - np.clip(y - grad, lower, upper)


def _projected_gradient_norm(y, grad, lower, upper) -> float:
    if y.size == 0:
        return 0.0
    return float(np.max(np.abs(_projected_step(y, grad, lower, upper))))


class _NotPositiveDefinite(np.linalg.LinAlgError):
    pass


class _BorderedBandedCholesky:
    """Cholesky factorization of a sparse SPD matrix with banded-plus-border structure.

    Columns much denser than the median form the border and are eliminated
    through a Schur complement; the rest is reordered by reverse
    Cuthill-McKee and factored in banded storage. Raises
    ``_NotPositiveDefinite`` when either factor fails, which makes this an
    inertia test as well as a solver.
    """

    def __init__(self, K: sp.spmatrix):
        K = sp.csc_matrix(K)
        nnz = np.diff(K.indptr)
        dense = nnz > max(50, 10 * float(np.median(nnz))) if K.shape[0] else np.zeros(0, bool)
        self.border = np.flatnonzero(dense)
        inner = np.flatnonzero(~dense)
        A = K[inner][:, inner].tocsr()
        perm = reverse_cuthill_mckee(A, symmetric_mode=True)
        self.idx = inner[perm]
        A = A[perm][:, perm].tocoo()
        lower = A.row >= A.col
        r, c, v = A.row[lower], A.col[lower], A.data[lower]
        bw = int(np.max(r - c, initial=0))
        ab = np.zeros((bw + 1, A.shape[0]))
        ab[r - c, c] = v
        try:
            self.cb = scipy.linalg.cholesky_banded(ab, lower=True)
        except np.linalg.LinAlgError as exc:
            raise _NotPositiveDefinite(str(exc)) from exc
        if self.border.size:
            self.B = K[self.idx][:, self.border].toarray()
            self.AinvB = self._solve_band(self.B)
            S = K[self.border][:, self.border].toarray() - self.B.T @ self.AinvB
            try:
                self.cs = scipy.linalg.cho_factor(S, lower=True)
            except np.linalg.LinAlgError as exc:
                raise _NotPositiveDefinite(str(exc)) from exc

    def _solve_band(self, b):
        if b.shape[0] == 0:
            return b.copy()
        return scipy.linalg.cho_solve_banded((self.cb, True), b)

    def solve(self, rhs):
        out = np.empty_like(rhs)
        b1 = rhs[self.idx]
        x1 = self._solve_band(b1)
        if self.border.size:
            x2 = scipy.linalg.cho_solve(self.cs, rhs[self.border] - self.B.T @ x1)
            x1 = x1 - self.AinvB @ x2
            out[self.border] = x2
        out[self.idx] = x1
        return out


def _newton_inner(al: _AugmentedLagrangian, y, lam, mu, rho, sizes, lo, hi, tol, max_iter):
    """Projected Newton (Bertsekas) on the box with Armijo search along the projection arc.

    The reduced Hessian is shifted by delta*I until its Cholesky factorization
    succeeds, so every free-space step is a descent direction.
    """
    val, g = al.value_and_grad(y, lam, mu, rho, sizes)
    delta = 0.0
    it = 0
    for it in range(1, max_iter + 1):
        pg = _projected_step(y, g, lo, hi)
        pgn = float(np.max(np.abs(pg), initial=0.0))
        if pgn <= tol:
            it -= 1
            break
        eps = min(1e-3, pgn)
        act = ((y <= lo + eps) & (g > 0)) | ((y >= hi - eps) & (g < 0))
        free = np.flatnonzero(~act)
        H = al.hessian(y, lam, mu, rho, sizes)
        Hff = H[free][:, free]
        scale = max(1e-8, float(np.mean(np.abs(Hff.diagonal()))) if free.size else 1.0)
        eye = sp.identity(free.size, format="csc")
        delta = 0.0 if delta < 1e-10 * scale else delta / 4
        while True:
            try:
                fac = _BorderedBandedCholesky(Hff + delta * eye)
                break
            except _NotPositiveDefinite:
                delta = max(1e-8 * scale, 8.0 * delta)
                if delta > 1e12 * scale:
                    raise _NonFinite("could not regularize the Newton system")
        d = np.zeros_like(y)
        d[act] = -g[act]
        gf = g[free]
        d[free] = fac.solve(-gf)
        alpha = 1.0
        accepted = False
        for _ in range(50):
            y_new = np.clip(y + alpha * d, lo, hi)
            try:
                v_new = al.value(y_new, lam, mu, rho)
            except _NonFinite:
                v_new = np.inf
            pred = float(g @ (y - y_new))
            if v_new <= val - 1e-4 * pred:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break
        y = y_new
        val, g = al.value_and_grad(y, lam, mu, rho, sizes)
        log.debug("  inner %d pg=%.3e alpha=%.3g delta=%.3g nact=%d v=%.10g", it, pgn, alpha, delta, act.sum(), val)
    return y, it


def _lbfgs_inner(al: _AugmentedLagrangian, y, lam, mu, rho, sizes, lo, hi, tol, max_iter, memory):
    bounds = list(zip(np.where(np.isfinite(lo), lo, None), np.where(np.isfinite(hi), hi, None)))
    res = scipy.optimize.minimize(
        al.value_and_grad,
        y,
        args=(lam, mu, rho, sizes),
        jac=True,
        method="L-BFGS-B",
        bounds=bounds,
        options={"maxiter": max_iter, "maxcor": memory, "gtol": tol, "ftol": 1e-15, "maxls": 40},
    )
    return np.clip(res.x, lo, hi), int(res.nit)


def kkt_residuals(problem: NlpProblem, x, multipliers: dict[str, np.ndarray]) -> KktResiduals:
    """Independent KKT certificate.

    Assembles the Lagrangian gradient block by block from dense Jacobians,
    without reusing the solver's evaluator. Stationarity is the
    projected-gradient norm in scaled variables.
    """
    x = np.asarray(x, dtype=float)
    n = problem.n_vars
    grad = np.array(problem.gradient(x), dtype=float)
    feas = 0.0
    comp = 0.0
    for c in problem.constraints:
        val = np.atleast_1d(np.asarray(c.fun(x), dtype=float)).ravel()
        jac = c.jac(x)
        jac = jac.toarray() if sp.issparse(jac) else np.asarray(jac, dtype=float).reshape(val.size, n)
        mult = np.asarray(multipliers.get(c.name, np.zeros(val.size)), dtype=float)
        grad += jac.T @ mult
        if c.kind == "eq":
            feas = max(feas, float(np.max(np.abs(val), initial=0.0)))
        else:
            feas = max(feas, float(np.max(np.maximum(val, 0.0), initial=0.0)))
            # dual feasibility and complementary slackness via min(mu, -g)
            comp = max(comp, float(np.max(np.abs(np.minimum(mult, -val)), initial=0.0)))
    s = problem.x_scale
    stat = _projected_gradient_norm(x / s, grad * s, problem.lower / s, problem.upper / s)
    bound_viol = float(np.max(np.maximum(problem.lower - x, 0.0) + np.maximum(x - problem.upper, 0.0), initial=0.0))
    return KktResiduals(stationarity=stat, feasibility=max(feas, bound_viol), complementarity=comp)


def solve(problem: NlpProblem, x0, options: SolverOptions | None = None) -> NlpSolution:
    """Minimize ``problem`` starting from ``x0`` (clamped into the bounds)."""
    opts = options or SolverOptions()
    al = _AugmentedLagrangian(problem)
    s = problem.x_scale
    lo, hi = problem.lower / s, problem.upper / s
    x = np.clip(np.asarray(x0, dtype=float).copy(), problem.lower, problem.upper)
    use_newton = opts.inner == "newton" or (opts.inner == "auto" and problem.hessian is not None)
    if use_newton and problem.hessian is None:
        raise ValueError("Newton inner solver requires a problem Hessian")

    trace: list[OuterRecord] = []
    lam = np.zeros(0)
    mu = np.zeros(0)
    f = float("nan")
    it = 0
    status = SolveStatus.MAX_ITERATIONS
    trace_file = open(opts.trace_path, "w", newline="") if opts.trace_path else None
    writer = csv.writer(trace_file) if trace_file else None
    if writer:
        writer.writerow(["iter", "objective", "feasibility", "stationarity", "penalty"])
    try:
        sizes = al.sizes(x)
        ce, ci = al.constraints(x)
        lam = np.zeros(ce.size)
        mu = np.zeros(ci.size)
        rho = opts.penalty0
        prev_viol = _violation(ce, ci, mu, rho)
        inner_tol = max(opts.tol_stat, 1e-2)
        stalled = 0
        for it in range(1, opts.max_iter + 1):
            y0 = x / s
            merit_start = al.value(y0, lam, mu, rho)
            if use_newton:
                y, nit = _newton_inner(al, y0, lam, mu, rho, sizes, lo, hi, inner_tol, opts.max_inner_iter)
            else:
                y, nit = _lbfgs_inner(al, y0, lam, mu, rho, sizes, lo, hi, inner_tol, opts.max_inner_iter, opts.lbfgs_memory)
            merit_end = al.value(y, lam, mu, rho)
            x = y * s
            ce, ci = al.constraints(x)
            viol = _violation(ce, ci, mu, rho)
            lam = lam + rho * ce
            mu = np.maximum(0.0, mu + rho * ci)
            feas = _feasibility(ce, ci)
            f = al.objective(x)
            je, ji = al.jacobians(x, sizes)
            lgrad = al.gradient(x) + je.T @ lam + ji.T @ mu
            stat = _projected_gradient_norm(y, lgrad * s, lo, hi)
            trace.append(OuterRecord(it, f, feas, stat, rho, merit_start, merit_end, nit))
            if writer:
                writer.writerow([it, repr(f), repr(feas), repr(stat), repr(rho)])
            log.debug("outer %d f=%.6g feas=%.3e stat=%.3e rho=%.1e inner=%d", it, f, feas, stat, rho, nit)

            if feas <= opts.tol_feas and stat <= opts.tol_stat:
                status = SolveStatus.CONVERGED
                break
            if viol > opts.violation_ratio * prev_viol:
                if rho >= opts.penalty_max:
                    stalled += 1
                else:
                    rho = min(rho * opts.penalty_growth, opts.penalty_max)
            else:
                stalled = 0
                prev_viol = viol
            # infeasibility: penalty exhausted and violation no longer shrinking
            if rho >= opts.penalty_max and stalled >= 2 and feas > opts.tol_feas:
                status = SolveStatus.INFEASIBLE
                break
            inner_tol = max(0.1 * opts.tol_stat, inner_tol * 0.1)
    except _NonFinite as exc:
        log.warning("numerical failure: %s", exc)
        status = SolveStatus.NUMERICAL_FAILURE
    finally:
        if trace_file:
            trace_file.close()

    mults = _split_multipliers(al, x, lam, mu)
    if status is SolveStatus.NUMERICAL_FAILURE:
        kkt = KktResiduals(float("inf"), float("inf"), float("inf"))
    else:
        # converged or not, report the independent certificate
        kkt = kkt_residuals(problem, x, mults)
        if status is SolveStatus.CONVERGED and (
            kkt.feasibility > opts.tol_feas or kkt.stationarity > opts.tol_stat * (1 + 1e-6)
        ):
            log.warning("certificate rejected solver convergence: %s", kkt)
            status = SolveStatus.MAX_ITERATIONS
    return NlpSolution(x, f, status, kkt, it, mults, trace)


def _violation(ce, ci, mu, rho) -> float:
    v = float(np.max(np.abs(ce), initial=0.0))
    if ci.size:
        v = max(v, float(np.max(np.abs(np.maximum(ci, -mu / rho)))))
    return v


def _feasibility(ce, ci) -> float:
    return max(float(np.max(np.abs(ce), initial=0.0)), float(np.max(np.maximum(ci, 0.0), initial=0.0)))


def _split_multipliers(al: _AugmentedLagrangian, x, lam, mu) -> dict[str, np.ndarray]:
    sizes_eq, sizes_in = al.sizes(x)
    out = {}
    if lam.size == sum(sizes_eq):
        out.update({k: v.copy() for k, v in al.split(lam, al.eq, sizes_eq).items()})
    if mu.size == sum(sizes_in):
        out.update({k: v.copy() for k, v in al.split(mu, al.ineq, sizes_in).items()})
    return out


def check_gradients(problem: NlpProblem, x, step: float = 1e-6, indices: Sequence[int] | None = None) -> dict[str, float]:
    """Worst relative error of analytic derivatives against central differences.

    Returns one entry for the objective and one per constraint block. The
    error of a block is ``max|analytic - numeric| / max(1, max|numeric|)``.
    ``indices`` restricts the check to a subset of variables.
    """
    x = np.asarray(x, dtype=float)
    idx = np.arange(problem.n_vars) if indices is None else np.asarray(indices)
    report = {}

    g = np.asarray(problem.gradient(x), dtype=float)
    num = np.empty(idx.size)
    for k, j in enumerate(idx):
        e = np.zeros_like(x)
        e[j] = step
        num[k] = (problem.objective(x + e) - problem.objective(x - e)) / (2 * step)
    report["objective"] = float(np.max(np.abs(g[idx] - num)) / max(1.0, float(np.max(np.abs(num), initial=0.0))))

    for c in problem.constraints:
        val = np.atleast_1d(np.asarray(c.fun(x), dtype=float))
        jac = c.jac(x)
        jac = jac.toarray() if sp.issparse(jac) else np.asarray(jac, dtype=float).reshape(val.size, -1)
        num = np.empty((val.size, idx.size))
        for k, j in enumerate(idx):
            e = np.zeros_like(x)
            e[j] = step
            num[:, k] = (np.asarray(c.fun(x + e)) - np.asarray(c.fun(x - e))) / (2 * step)
        err = np.max(np.abs(jac[:, idx] - num), initial=0.0)
        report[c.name] = float(err / max(1.0, float(np.max(np.abs(num), initial=0.0))))
    return report
