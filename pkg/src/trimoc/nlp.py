"""Smooth NLP solver: SQP with an active-set QP subproblem.

Problems are stated as

    min f(x)  s.t.  c_eq(x) = 0,  g_in(x) <= 0,  lower <= x <= upper.

Multiplier sign convention (costate recovery depends on it):
L = f + mu^T c_eq + lam^T g_in, so stationarity reads
grad f + J_eq^T mu + J_in^T lam + nu = 0 with nu the signed bound
multipliers (<= 0 at an active lower bound, >= 0 at an active upper).

Constraint Jacobians and the optional curvature callback may return dense
arrays or scipy.sparse matrices; large KKT systems are factorized sparsely.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "NlpProblem",
    "NlpSolution",
    "SqpOptions",
    "QpMultipliers",
    "QpError",
    "solve_sqp",
    "qp_solve",
    "kkt_residuals",
]


class QpError(RuntimeError):
    """QP subproblem could not be solved."""


@dataclass(frozen=True)
class NlpProblem:
    """Smooth NLP with callables for values and first derivatives.

    `hess`, when given, returns a positive-semidefinite curvature matrix
    used by the gauss-newton Hessian mode. `validate` triggers a finite-
    difference check of all supplied derivatives at the initial point.
    """

    n: int
    objective: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    eq_con: Callable[[np.ndarray], np.ndarray] | None = None
    eq_jac: Callable[[np.ndarray], object] | None = None
    ineq_con: Callable[[np.ndarray], np.ndarray] | None = None
    ineq_jac: Callable[[np.ndarray], object] | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    hess: Callable[[np.ndarray], object] | None = None
    validate: bool = False

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.full(self.n, -np.inf) if self.lower is None else np.asarray(self.lower, dtype=float)
        hi = np.full(self.n, np.inf) if self.upper is None else np.asarray(self.upper, dtype=float)
        return lo, hi


@dataclass
class NlpSolution:
    x_star: np.ndarray
    objective: float
    mult_eq: np.ndarray
    mult_ineq: np.ndarray
    mult_bounds: np.ndarray
    kkt_residuals: dict
    iterations: int
    status: str
    message: str = ""
    history: list = field(default_factory=list)
    hessian_final: np.ndarray | None = None


@dataclass(frozen=True)
class SqpOptions:
    tol: float = 1e-8
    max_iter: int = 200
    hessian: str = "bfgs"  # bfgs | gauss-newton | fd-exact
    penalty_init: float = 1.0
    penalty_margin: float = 0.1
    armijo: float = 1e-4
    backtrack: float = 0.5
    min_step: float = 1e-12
    log_path: str | None = None

    def __post_init__(self) -> None:
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.hessian not in ("bfgs", "gauss-newton", "fd-exact"):
            raise ValueError(f"unknown hessian mode {self.hessian!r}")


@dataclass
class QpMultipliers:
    eq: np.ndarray
    ineq: np.ndarray
    bounds: np.ndarray


# --- linear algebra helpers -------------------------------------------------

def _issparse(a) -> bool:
    return sp.issparse(a)


def _matvec_t(a, v: np.ndarray) -> np.ndarray:
    """a.T @ v for dense or sparse a."""
    out = a.T @ v
    return np.asarray(out).ravel()


def _assemble_kkt(h, a, n: int, k: int, delta: float, sparse_mode: bool):
    if sparse_mode:
        h_s = sp.csr_matrix(h) if not _issparse(h) else h.tocsr()
        if delta:
            h_s = h_s + delta * sp.identity(n, format="csr")
        if not k:
            return h_s.tocsc()
        return sp.bmat([[h_s, a.T], [a, -delta * sp.identity(k) if delta else None]],
                       format="csc")
    kkt = np.zeros((n + k, n + k))
    kkt[:n, :n] = (h.toarray() if _issparse(h) else h) + delta * np.eye(n)
    if k:
        a_d = a.toarray() if _issparse(a) else np.asarray(a, dtype=float)
        kkt[:n, n:] = a_d.T
        kkt[n:, :n] = a_d
        kkt[n:, n:] = -delta * np.eye(k)
    return kkt


def _equilibrated_lu_solve(kkt, rhs: np.ndarray, sparse_mode: bool) -> np.ndarray:
    """LU solve after symmetric scaling, with two refinement passes.

    Equilibration tames the wide entry range of curvature vs. constraint
    rows; refinement recovers the digits lost to it.
    """
    if sparse_mode:
        scale = np.sqrt(np.maximum(abs(kkt).max(axis=0).toarray().ravel(), 1e-12))
        d_inv = sp.diags(1.0 / scale)
        kkt_eq = (d_inv @ kkt @ d_inv).tocsc()
        lu = spla.splu(kkt_eq)
        solve = lu.solve
    else:
        scale = np.sqrt(np.maximum(np.abs(kkt).max(axis=0), 1e-12))
        kkt_eq = kkt / np.outer(scale, scale)
        lu_piv = scipy.linalg.lu_factor(kkt_eq)
        solve = lambda b: scipy.linalg.lu_solve(lu_piv, b)
    rhs_eq = rhs / scale
    z_eq = solve(rhs_eq)
    for _ in range(2):
        if not np.all(np.isfinite(z_eq)):
            break
        z_eq += solve(rhs_eq - kkt_eq @ z_eq)
    return z_eq / scale


def _kkt_solve(h, a, rhs: np.ndarray, n: int, sparse_mode: bool) -> np.ndarray:
    """Solve the saddle system [[H, A^T], [A, 0]] z = rhs with retries.

    Near-singular systems are retried with +delta I / -delta I diagonal
    regularization, delta in {1e-8, 1e-6, 1e-4}.
    """
    k = rhs.size - n
    tol = 1e-6 * (1.0 + np.linalg.norm(rhs, ord=np.inf))
    for delta in (0.0, 1e-8, 1e-6, 1e-4):
        with warnings.catch_warnings():
            # Retries handle singular factors; the library warning is noise.
            warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
            try:
                kkt = _assemble_kkt(h, a, n, k, delta, sparse_mode)
                z = _equilibrated_lu_solve(kkt, rhs, sparse_mode)
            except (np.linalg.LinAlgError, RuntimeError, ValueError):
                continue
        if not np.all(np.isfinite(z)):
            continue
        if np.linalg.norm(kkt @ z - rhs, ord=np.inf) > tol:
            continue
        if k and delta:
            # The -delta I block can absorb inconsistent constraints; accept
            # only if the unregularized rows actually hold.
            cons = np.asarray(a @ z[:n]).ravel() - rhs[n:]
            if np.max(np.abs(cons)) > tol:
                continue
        return z
    raise QpError("KKT system singular after regularized retries")


def _unit_row(n: int, j: int, sign: float, sparse_mode: bool):
    if sparse_mode:
        return sp.csr_matrix(([sign], ([0], [j])), shape=(1, n))
    row = np.zeros((1, n))
    row[0, j] = sign
    return row


def _vstack(rows, sparse_mode: bool):
    if sparse_mode:
        return sp.vstack([sp.csr_matrix(r) for r in rows], format="csr")
    return np.vstack([r.toarray() if _issparse(r) else r for r in rows])


# --- QP subproblem ----------------------------------------------------------

def qp_solve(h, g: np.ndarray, a_eq=None, b_eq: np.ndarray | None = None,
             a_in=None, b_in: np.ndarray | None = None,
             bounds: tuple[np.ndarray, np.ndarray] | None = None,
             feas_tol: float = 1e-10,
             max_iter: int | None = None) -> tuple[np.ndarray, QpMultipliers]:
    """Minimize 1/2 d^T H d + g^T d subject to linear constraints on d.

    Constraints: a_eq d = b_eq, a_in d <= b_in, bounds[0] <= d <= bounds[1].
    H must be positive definite on the constraint null space. Solved by an
    equality-constrained KKT solve plus a primal active-set loop over the
    inequalities and bounds. Multipliers follow the package convention
    (H d + g + A_eq^T mu + A_in^T lam + nu = 0, lam >= 0).
    """
    g = np.asarray(g, dtype=float)
    n = g.size
    n_eq = 0 if b_eq is None else len(b_eq)
    n_in = 0 if b_in is None else len(b_in)
    lo, hi = (np.full(n, -np.inf), np.full(n, np.inf)) if bounds is None else bounds
    sparse_mode = _issparse(h) or _issparse(a_eq) or _issparse(a_in) or n + n_eq > 1200

    # Working set entries: ("in", i) or ("lo", j) or ("up", j).
    working: list[tuple[str, int]] = []
    if max_iter is None:
        max_iter = 3 * (n_in + 2 * n) + 20

    def row_of(entry: tuple[str, int]):
        kind, idx = entry
        if kind == "in":
            if sparse_mode:
                return sp.csr_matrix(a_in)[idx]
            return np.asarray(a_in, dtype=float)[idx:idx + 1]
        sign = -1.0 if kind == "lo" else 1.0
        return _unit_row(n, idx, sign, sparse_mode)

    def rhs_of(entry: tuple[str, int]) -> float:
        kind, idx = entry
        if kind == "in":
            return float(b_in[idx])
        return -lo[idx] if kind == "lo" else hi[idx]

    for _ in range(max_iter):
        rows = []
        if n_eq:
            rows.append(a_eq)
        rows.extend(row_of(e) for e in working)
        if rows:
            a_stack = _vstack(rows, sparse_mode)
            b_stack = np.concatenate([
                np.asarray(b_eq, dtype=float) if n_eq else np.zeros(0),
                np.array([rhs_of(e) for e in working]),
            ])
        else:
            a_stack, b_stack = None, np.zeros(0)
        rhs = np.concatenate([-g, b_stack])
        z = _kkt_solve(h, a_stack, rhs, n, sparse_mode)
        d = z[:n]
        mults = z[n:]
        mu = mults[:n_eq]
        lam_w = mults[n_eq:]

        # Drop the most negative working-set multiplier, if any.
        if lam_w.size and lam_w.min() < -1e-11:
            working.pop(int(np.argmin(lam_w)))
            continue

        # Add the most violated inactive inequality or bound.
        viol_val = feas_tol
        viol_entry = None
        if n_in:
            gap = (a_in @ d if not _issparse(a_in) else np.asarray((a_in @ d)).ravel()) - b_in
            for i in range(n_in):
                if ("in", i) not in working and gap[i] > viol_val:
                    viol_val, viol_entry = gap[i], ("in", i)
        for j in range(n):
            if np.isfinite(lo[j]) and ("lo", j) not in working and lo[j] - d[j] > viol_val:
                viol_val, viol_entry = lo[j] - d[j], ("lo", j)
            if np.isfinite(hi[j]) and ("up", j) not in working and d[j] - hi[j] > viol_val:
                viol_val, viol_entry = d[j] - hi[j], ("up", j)
        if viol_entry is None:
            lam = np.zeros(n_in)
            nu = np.zeros(n)
            for entry, val in zip(working, lam_w):
                kind, idx = entry
                if kind == "in":
                    lam[idx] = val
                elif kind == "lo":
                    nu[idx] = -val
                else:
                    nu[idx] = val
            return d, QpMultipliers(eq=mu, ineq=lam, bounds=nu)
        working.append(viol_entry)

    raise QpError("active-set loop did not terminate")


def _elastic_qp(h, g, a_eq, b_eq, a_in, b_in, bounds, rho: float):
    """Slack-relaxed QP: equality and inequality violations penalized in L1."""
    g = np.asarray(g, dtype=float)
    n = g.size
    n_eq = 0 if b_eq is None else len(b_eq)
    n_in = 0 if b_in is None else len(b_in)
    n_ext = n + 2 * n_eq + n_in
    sparse_mode = _issparse(h) or _issparse(a_eq) or _issparse(a_in) or n_ext > 1200
    eps = 1e-8

    if sparse_mode:
        h_s = sp.csr_matrix(h) if not _issparse(h) else h
        h_ext = sp.block_diag([h_s, eps * sp.identity(2 * n_eq + n_in)], format="csr")
    else:
        h_ext = np.zeros((n_ext, n_ext))
        h_ext[:n, :n] = h.toarray() if _issparse(h) else h
        h_ext[n:, n:] = eps * np.eye(2 * n_eq + n_in)
    g_ext = np.concatenate([g, rho * np.ones(2 * n_eq + n_in)])

    blocks_eq = None
    if n_eq:
        eye = sp.identity(n_eq) if sparse_mode else np.eye(n_eq)
        zero_in = (sp.csr_matrix((n_eq, n_in)) if sparse_mode else np.zeros((n_eq, n_in)))
        if sparse_mode:
            blocks_eq = sp.hstack([sp.csr_matrix(a_eq), -eye, eye, zero_in], format="csr")
        else:
            a_d = a_eq.toarray() if _issparse(a_eq) else np.asarray(a_eq, dtype=float)
            blocks_eq = np.hstack([a_d, -eye, eye, zero_in])
    blocks_in = None
    if n_in:
        eye_in = sp.identity(n_in) if sparse_mode else np.eye(n_in)
        zero_eq = (sp.csr_matrix((n_in, 2 * n_eq)) if sparse_mode else np.zeros((n_in, 2 * n_eq)))
        if sparse_mode:
            blocks_in = sp.hstack([sp.csr_matrix(a_in), zero_eq, -eye_in], format="csr")
        else:
            a_d = a_in.toarray() if _issparse(a_in) else np.asarray(a_in, dtype=float)
            blocks_in = np.hstack([a_d, zero_eq, -eye_in])

    lo, hi = bounds if bounds is not None else (np.full(n, -np.inf), np.full(n, np.inf))
    lo_ext = np.concatenate([lo, np.zeros(2 * n_eq + n_in)])
    hi_ext = np.concatenate([hi, np.full(2 * n_eq + n_in, np.inf)])
    d_ext, mults = qp_solve(h_ext, g_ext, blocks_eq, b_eq, blocks_in, b_in,
                            bounds=(lo_ext, hi_ext))
    slack = d_ext[n:]
    return d_ext[:n], QpMultipliers(eq=mults.eq, ineq=mults.ineq, bounds=mults.bounds[:n]), slack


# --- KKT residuals ----------------------------------------------------------

def kkt_residuals(problem: NlpProblem, x: np.ndarray, mult: QpMultipliers) -> dict:
    """Stationarity / feasibility / complementarity residuals at (x, mult)."""
    x = np.asarray(x, dtype=float)
    grad = np.asarray(problem.gradient(x), dtype=float)
    stat = grad.copy()
    feas = 0.0
    compl = 0.0
    if problem.eq_con is not None:
        c = np.asarray(problem.eq_con(x), dtype=float)
        feas = max(feas, float(np.max(np.abs(c))) if c.size else 0.0)
        if mult.eq.size == c.size:
            stat += _matvec_t(problem.eq_jac(x), mult.eq)
    if problem.ineq_con is not None:
        g_in = np.asarray(problem.ineq_con(x), dtype=float)
        if g_in.size:
            feas = max(feas, float(np.max(np.maximum(g_in, 0.0))))
            if mult.ineq.size == g_in.size:
                compl = max(compl, float(np.max(np.abs(mult.ineq * g_in))))
        if mult.ineq.size == g_in.size:
            stat += _matvec_t(problem.ineq_jac(x), mult.ineq)
    lo, hi = problem.bounds()
    feas = max(feas, float(np.max(np.maximum(lo - x, 0.0), initial=0.0)))
    feas = max(feas, float(np.max(np.maximum(x - hi, 0.0), initial=0.0)))
    nu = mult.bounds
    stat += nu
    lower_gap = np.where(np.isfinite(lo), x - lo, np.inf)
    upper_gap = np.where(np.isfinite(hi), hi - x, np.inf)
    gap = np.where(nu < 0, lower_gap, np.where(nu > 0, upper_gap, 0.0))
    active = nu != 0
    if np.any(active):
        compl = max(compl, float(np.max(np.abs(nu[active] * gap[active]))))
    return {
        "stationarity": float(np.max(np.abs(stat))) if stat.size else 0.0,
        "feasibility": feas,
        "complementarity": compl,
    }


# --- SQP driver -------------------------------------------------------------

def _violation(c_eq: np.ndarray, g_in: np.ndarray) -> float:
    v = 0.0
    if c_eq.size:
        v += float(np.sum(np.abs(c_eq)))
    if g_in.size:
        v += float(np.sum(np.maximum(g_in, 0.0)))
    return v


def _fd_check(problem: NlpProblem, x: np.ndarray) -> None:
    """Finite-difference validation of gradient and Jacobians at x."""
    step = 1e-6
    grad = np.asarray(problem.gradient(x), dtype=float)
    fd = np.zeros_like(grad)
    for j in range(problem.n):
        e = np.zeros(problem.n)
        e[j] = step * (1.0 + abs(x[j]))
        fd[j] = (problem.objective(x + e) - problem.objective(x - e)) / (2 * e[j])
    err = np.max(np.abs(grad - fd) / (1.0 + np.abs(fd)))
    if err > 1e-4:
        raise ValueError(f"objective gradient fails FD validation (rel err {err:.2e})")
    for con, jac, name in ((problem.eq_con, problem.eq_jac, "equality"),
                           (problem.ineq_con, problem.ineq_jac, "inequality")):
        if con is None:
            continue
        j_mat = jac(x)
        j_dense = j_mat.toarray() if _issparse(j_mat) else np.asarray(j_mat, dtype=float)
        for j in range(problem.n):
            e = np.zeros(problem.n)
            e[j] = step * (1.0 + abs(x[j]))
            col = (np.asarray(con(x + e), dtype=float) - np.asarray(con(x - e), dtype=float)) / (2 * e[j])
            err = np.max(np.abs(j_dense[:, j] - col) / (1.0 + np.abs(col)))
            if err > 1e-4:
                raise ValueError(f"{name} Jacobian fails FD validation at column {j} "
                                 f"(rel err {err:.2e})")


def _fd_lagrangian_hessian(problem: NlpProblem, x: np.ndarray,
                           mult: QpMultipliers) -> np.ndarray:
    def grad_l(y: np.ndarray) -> np.ndarray:
        g = np.asarray(problem.gradient(y), dtype=float)
        if problem.eq_con is not None and mult.eq.size:
            g = g + _matvec_t(problem.eq_jac(y), mult.eq)
        if problem.ineq_con is not None and mult.ineq.size:
            g = g + _matvec_t(problem.ineq_jac(y), mult.ineq)
        return g

    n = problem.n
    h = np.zeros((n, n))
    base = grad_l(x)
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1e-6 * (1.0 + abs(x[j]))
        h[:, j] = (grad_l(x + e) - base) / e[j]
    h = 0.5 * (h + h.T)
    # Eigenvalue floor keeps the QP subproblem convex.
    w, v = np.linalg.eigh(h)
    floor = 1e-8 * max(1.0, float(np.max(np.abs(w))) if w.size else 1.0)
    return (v * np.maximum(w, floor)) @ v.T


def solve_sqp(problem: NlpProblem, x0: np.ndarray,
              opts: SqpOptions | None = None) -> NlpSolution:
    """SQP with an L1 exact-penalty line search and damped BFGS default.

    Returns status "converged" when all three KKT residual norms fall below
    opts.tol; "maxiter", "infeasible" or "evaluation_error" otherwise.
    """
    opts = opts or SqpOptions()
    x = np.asarray(x0, dtype=float).copy()
    if x.shape != (problem.n,):
        raise ValueError(f"x0 has shape {x.shape}, expected ({problem.n},)")
    lo, hi = problem.bounds()
    mult = QpMultipliers(eq=np.zeros(0), ineq=np.zeros(0), bounds=np.zeros(problem.n))
    history: list[tuple] = []

    def finish(status: str, message: str, iters: int, f_val: float,
               bfgs: np.ndarray | None) -> NlpSolution:
        kkt = kkt_residuals(problem, x, mult) if status != "evaluation_error" else {
            "stationarity": np.inf, "feasibility": np.inf, "complementarity": np.inf}
        sol = NlpSolution(x_star=x, objective=f_val, mult_eq=mult.eq,
                          mult_ineq=mult.ineq, mult_bounds=mult.bounds,
                          kkt_residuals=kkt, iterations=iters, status=status,
                          message=message, history=history, hessian_final=bfgs)
        if opts.log_path:
            with open(opts.log_path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["iter", "objective", "stationarity", "feasibility",
                                 "step_norm", "penalty"])
                writer.writerows(history)
        return sol

    if np.any(lo > hi):
        return finish("infeasible", "contradictory bounds (lower > upper)", 0, np.nan, None)
    x = np.clip(x, lo, hi)

    def eval_vals(y: np.ndarray):
        f = float(problem.objective(y))
        c = np.asarray(problem.eq_con(y), dtype=float) if problem.eq_con else np.zeros(0)
        g_in = np.asarray(problem.ineq_con(y), dtype=float) if problem.ineq_con else np.zeros(0)
        return f, c, g_in

    try:
        f, c_eq, g_in = eval_vals(x)
        grad = np.asarray(problem.gradient(x), dtype=float)
    except (FloatingPointError, ValueError, ZeroDivisionError) as exc:
        return finish("evaluation_error", f"callback failed at x0: {exc}", 0, np.nan, None)
    if not (np.isfinite(f) and np.all(np.isfinite(c_eq)) and np.all(np.isfinite(g_in))
            and np.all(np.isfinite(grad))):
        return finish("evaluation_error", "non-finite value at x0", 0, f, None)

    if problem.validate:
        _fd_check(problem, x)
    mult = QpMultipliers(eq=np.zeros(c_eq.size), ineq=np.zeros(g_in.size),
                         bounds=np.zeros(problem.n))

    bfgs = np.eye(problem.n) if opts.hessian == "bfgs" else None
    if opts.hessian == "gauss-newton" and problem.hess is None:
        raise ValueError("gauss-newton mode requires problem.hess")
    sigma = opts.penalty_init
    best_kkt = np.inf
    stall = 0

    for it in range(opts.max_iter):
        j_eq = problem.eq_jac(x) if problem.eq_con else None
        j_in = problem.ineq_jac(x) if problem.ineq_con else None
        if opts.hessian == "bfgs":
            h = bfgs
        elif opts.hessian == "gauss-newton":
            h = problem.hess(x)
        else:
            h = _fd_lagrangian_hessian(problem, x, mult)

        step_bounds = (lo - x, hi - x)
        try:
            d, qp_mult = qp_solve(h, grad, j_eq, -c_eq if c_eq.size else None,
                                  j_in, -g_in if g_in.size else None, step_bounds)
        except QpError:
            rho = 1e6 * (1.0 + float(np.max(np.abs(grad))))
            try:
                d, qp_mult, slack = _elastic_qp(h, grad, j_eq,
                                                -c_eq if c_eq.size else None,
                                                j_in, -g_in if g_in.size else None,
                                                step_bounds, rho)
            except QpError as exc:
                return finish("infeasible", f"elastic QP failed: {exc}", it, f, bfgs)
            if slack.size and np.max(slack) > 1e-6 * (1.0 + float(np.max(np.abs(c_eq), initial=0.0))):
                return finish("infeasible",
                              "QP subproblem infeasible after elastic relaxation", it, f, bfgs)
        mult = qp_mult

        kkt = kkt_residuals(problem, x, mult)
        step_norm = float(np.max(np.abs(d))) if d.size else 0.0
        history.append((it, f, kkt["stationarity"], kkt["feasibility"], step_norm, sigma))
        kkt_max = max(kkt.values())
        if kkt_max <= opts.tol:
            return finish("converged", "KKT residuals below tolerance", it, f, bfgs)
        if kkt_max < 0.99 * best_kkt:
            best_kkt = kkt_max
            stall = 0
        else:
            stall += 1
        if stall >= 8 and step_norm <= 1e-10 * (1.0 + float(np.max(np.abs(x)))):
            return finish("maxiter", "stalled at numerical floor before tolerance",
                          it, f, bfgs)

        mult_norm = max(
            float(np.max(np.abs(mult.eq), initial=0.0)),
            float(np.max(np.abs(mult.ineq), initial=0.0)),
        )
        # Keep the penalty above the dual norm, but let it recover from
        # early overshoots so the merit function stops strangling steps.
        need = mult_norm * (1.0 + opts.penalty_margin)
        if sigma < need:
            sigma = need
        elif sigma > 10.0 * max(need, opts.penalty_init):
            sigma = max(need, opts.penalty_init, 0.1 * sigma)

        viol0 = _violation(c_eq, g_in)
        merit0 = f + sigma * viol0
        descent = float(grad @ d) - sigma * viol0
        alpha = 1.0
        accepted = False
        while alpha >= opts.min_step:
            x_try = x + alpha * d
            try:
                f_try, c_try, g_try = eval_vals(x_try)
            except (FloatingPointError, ValueError, ZeroDivisionError):
                alpha *= opts.backtrack
                continue
            if not (np.isfinite(f_try) and np.all(np.isfinite(c_try))
                    and np.all(np.isfinite(g_try))):
                alpha *= opts.backtrack
                continue
            if f_try + sigma * _violation(c_try, g_try) <= merit0 + opts.armijo * alpha * descent:
                accepted = True
                break
            alpha *= opts.backtrack
        if not accepted:
            # Take the minimal step rather than stalling in place.
            alpha = opts.min_step
            x_try = x + alpha * d
            f_try, c_try, g_try = eval_vals(x_try)

        grad_try = np.asarray(problem.gradient(x_try), dtype=float)
        if not np.all(np.isfinite(grad_try)):
            return finish("evaluation_error", "non-finite gradient", it + 1, f, bfgs)

        if opts.hessian == "bfgs":
            s_vec = x_try - x
            y_vec = grad_try - grad
            if mult.eq.size:
                y_vec = y_vec + _matvec_t(problem.eq_jac(x_try), mult.eq) - _matvec_t(j_eq, mult.eq)
            if mult.ineq.size:
                y_vec = y_vec + _matvec_t(problem.ineq_jac(x_try), mult.ineq) - _matvec_t(j_in, mult.ineq)
            bfgs = _bfgs_update(bfgs, s_vec, y_vec)

        x, f, c_eq, g_in, grad = x_try, f_try, c_try, g_try, grad_try

    return finish("maxiter", "iteration limit reached", opts.max_iter, f, bfgs)


def _bfgs_update(b: np.ndarray, s: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Powell-damped BFGS update; keeps b positive definite."""
    s_norm = float(s @ s)
    if s_norm <= 1e-30:
        return b
    bs = b @ s
    sbs = float(s @ bs)
    sy = float(s @ y)
    if sbs <= 0:
        return b
    if sy < 0.2 * sbs:
        theta = 0.8 * sbs / (sbs - sy)
        y = theta * y + (1.0 - theta) * bs
        sy = float(s @ y)
    if sy <= 1e-30:
        return b
    return b - np.outer(bs, bs) / sbs + np.outer(y, y) / sy
