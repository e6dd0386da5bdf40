"""Optimal control problems: full transcription, reduced problem, steady state.

Three problem classes share the NLP layer:
  * the full problem over (s, v_s, theta, v_theta) via direct multiple
    shooting with RK4 defects and piecewise-constant controls,
  * the reduced problem on the trim manifold, where the shape coordinate
    is a single shared scalar and the trim residual is a path constraint,
  * the steady-state trim optimization over a single triple (s, v_th, u).

Costates are recovered from the shooting-defect multipliers with the sign
convention fixed so the terminal costate vanishes in unconstrained
components.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .model import (
    MechModel,
    State,
    Trajectory,
    _el_rhs_raw,
    _rk4_step_raw,
    el_jacobians,
)
from .nlp import NlpProblem, NlpSolution, SqpOptions, solve_sqp
from .trim import trim_residual, trim_residual_grads

__all__ = [
    "QuadraticCost",
    "TrimPenaltyCost",
    "CustomCost",
    "GeneralTerminal",
    "OcpSpec",
    "OcpSolution",
    "TocpSolution",
    "SopSolution",
    "transcribe",
    "solve_ocp",
    "recover_costates",
    "solve_tocp",
    "solve_sop",
    "spec_to_dict",
    "spec_from_dict",
]

log = logging.getLogger(__name__)

S_BOUND_MARGIN = 1e-6


# --- stage costs ------------------------------------------------------------

@dataclass(frozen=True)
class QuadraticCost:
    """1/2 (x - x_ref)^T Q (x - x_ref) + (u - u_ref)^T R (u - u_ref).

    Q and R are diagonals. Note the control term carries no 1/2. The theta
    weight q[2] must be zero: stage costs are independent of the cyclic
    coordinate.
    """

    x_ref: np.ndarray
    q: np.ndarray
    u_ref: np.ndarray
    r: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "x_ref", np.asarray(self.x_ref, dtype=float))
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float))
        object.__setattr__(self, "u_ref", np.asarray(self.u_ref, dtype=float))
        object.__setattr__(self, "r", np.asarray(self.r, dtype=float))
        if self.q.shape != (4,):
            raise ValueError("q must hold 4 diagonal weights")
        if self.q[2] != 0.0:
            raise ValueError("theta weight q[2] must be 0 (cost must not depend on theta)")

    def value(self, model: MechModel, x: np.ndarray, u: np.ndarray) -> float:
        dx = x - self.x_ref
        du = u - self.u_ref
        return float(0.5 * self.q @ dx**2 + self.r @ du**2)

    def grad(self, model: MechModel, x: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.q * (x - self.x_ref), 2.0 * self.r * (u - self.u_ref)

    def gn_block(self, model: MechModel, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return np.diag(np.concatenate([self.q, 2.0 * self.r]))


@dataclass(frozen=True)
class TrimPenaltyCost:
    """w_t T(s, v_th, u)^2 + s_weight/2 (s - s_ref)^2 + 1/2 (u - u_ref)^T R (u - u_ref)."""

    w_t: float
    s_ref: float
    u_ref: np.ndarray
    r: np.ndarray
    s_weight: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "u_ref", np.asarray(self.u_ref, dtype=float))
        object.__setattr__(self, "r", np.asarray(self.r, dtype=float))

    def value(self, model: MechModel, x: np.ndarray, u: np.ndarray) -> float:
        t_res = trim_residual(model, x[0], x[3], u)
        du = u - self.u_ref
        return float(self.w_t * t_res**2 + 0.5 * self.s_weight * (x[0] - self.s_ref)**2
                     + 0.5 * self.r @ du**2)

    def grad(self, model: MechModel, x: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        t_res = trim_residual(model, x[0], x[3], u)
        dt_s, dt_v, dt_u = trim_residual_grads(model, x[0], x[3], u)
        gx = np.array([
            2.0 * self.w_t * t_res * dt_s + self.s_weight * (x[0] - self.s_ref),
            0.0,
            0.0,
            2.0 * self.w_t * t_res * dt_v,
        ])
        gu = 2.0 * self.w_t * t_res * dt_u + self.r * (u - self.u_ref)
        return gx, gu

    def gn_block(self, model: MechModel, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        # Gauss-Newton for the squared residual: keep 2 w_t (grad T)(grad T)^T,
        # drop the T * hess(T) term so the block stays PSD.
        dt_s, dt_v, dt_u = trim_residual_grads(model, x[0], x[3], u)
        g = np.concatenate([[dt_s, 0.0, 0.0, dt_v], dt_u])
        block = 2.0 * self.w_t * np.outer(g, g)
        block[0, 0] += self.s_weight
        m = len(u)
        block[4:, 4:] += np.diag(self.r)
        return block


@dataclass(frozen=True)
class CustomCost:
    """Stage cost from user callables l(s, v_s, v_th, u) and its gradient.

    grad_fn returns (dl/ds, dl/dv_s, dl/dv_th, dl/du). Theta-independence is
    structural: the callables never see theta.
    """

    fn: Callable[[float, float, float, np.ndarray], float]
    grad_fn: Callable[[float, float, float, np.ndarray], tuple]
    u_ref: np.ndarray | None = None

    def value(self, model: MechModel, x: np.ndarray, u: np.ndarray) -> float:
        return float(self.fn(x[0], x[1], x[3], u))

    def grad(self, model: MechModel, x: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        d_s, d_vs, d_vth, d_u = self.grad_fn(x[0], x[1], x[3], u)
        return np.array([d_s, d_vs, 0.0, d_vth]), np.asarray(d_u, dtype=float)

    gn_block = None


@dataclass(frozen=True)
class GeneralTerminal:
    """Terminal set psi(x(T)) <= 0 with Jacobian rows over the state."""

    psi: Callable[[np.ndarray], np.ndarray]
    psi_jac: Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class OcpSpec:
    """Full problem description: dynamics, horizon, cost and boundary data.

    `terminal` is None, a sequence of (state-index, value) pairs fixed at
    t = T, or a GeneralTerminal. `model_doc` is an optional serialization
    hint ({"name": ..., "params": {...}}) used by the JSON codec.
    """

    model: MechModel
    horizon: float
    intervals: int
    cost: object
    x0: State
    terminal: object = None
    u_lower: np.ndarray | None = None
    u_upper: np.ndarray | None = None
    model_doc: dict | None = None

    def __post_init__(self) -> None:
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.intervals < 1:
            raise ValueError("need at least one shooting interval")
        if self.terminal is not None and not isinstance(self.terminal, GeneralTerminal):
            comps = tuple((int(i), float(v)) for i, v in self.terminal)
            for idx, _ in comps:
                if idx not in (0, 1, 2, 3):
                    raise ValueError(f"terminal component index {idx} outside 0..3")
            object.__setattr__(self, "terminal", comps)

    @property
    def step(self) -> float:
        return self.horizon / self.intervals

    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.intervals + 1)


@dataclass
class OcpSolution:
    trajectory: Trajectory
    objective: float
    nlp_status: str
    kkt: dict
    stage_costs: np.ndarray
    defect_max: float
    adjoint_consistency: float
    nlp: NlpSolution


@dataclass
class TocpSolution:
    """Reduced-problem solution: shared shape scalar plus cyclic dynamics."""

    s_bar: float
    times: np.ndarray
    th_bar: np.ndarray
    v_bar: np.ndarray
    u_bar: np.ndarray
    l_th_bar: np.ndarray
    l_vth_bar: np.ndarray
    l_trim: np.ndarray
    objective: float
    nlp_status: str
    kkt: dict
    stage_costs: np.ndarray
    nlp: NlpSolution

    @property
    def step(self) -> float:
        return float(self.times[1] - self.times[0])


@dataclass
class SopSolution:
    s_bar: float
    v_theta_bar: float
    u_bar: np.ndarray
    lam: float
    residuals: object
    trim_value: float
    cyclic_forcing: float
    nlp_status: str
    nlp: NlpSolution


# --- RK4 with sensitivities -------------------------------------------------

def _rhs(model: MechModel, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    return _el_rhs_raw(model, x[0], x[1], x[3], u)


def _rk4_with_jac(model: MechModel, x: np.ndarray, u: np.ndarray,
                  h: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """RK4 step and its exact sensitivities w.r.t. state and control."""
    eye = np.eye(4)
    k1 = _rhs(model, x, u)
    a1, b1 = el_jacobians(model, x, u)
    x2 = x + 0.5 * h * k1
    k2 = _rhs(model, x2, u)
    a2, b2 = el_jacobians(model, x2, u)
    dk2x = a2 @ (eye + 0.5 * h * a1)
    dk2u = a2 @ (0.5 * h * b1) + b2
    x3 = x + 0.5 * h * k2
    k3 = _rhs(model, x3, u)
    a3, b3 = el_jacobians(model, x3, u)
    dk3x = a3 @ (eye + 0.5 * h * dk2x)
    dk3u = a3 @ (0.5 * h * dk2u) + b3
    x4 = x + h * k3
    k4 = _rhs(model, x4, u)
    a4, b4 = el_jacobians(model, x4, u)
    dk4x = a4 @ (eye + h * dk3x)
    dk4u = a4 @ (h * dk3u) + b4
    x_next = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    phi_x = eye + (h / 6.0) * (a1 + 2 * dk2x + 2 * dk3x + dk4x)
    phi_u = (h / 6.0) * (b1 + 2 * dk2u + 2 * dk3u + dk4u)
    return x_next, phi_x, phi_u


# --- full-problem transcription ----------------------------------------------

def _split(spec: OcpSpec, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n_states = 4 * (spec.intervals + 1)
    xs = w[:n_states].reshape(spec.intervals + 1, 4)
    us = w[n_states:].reshape(spec.intervals, spec.model.control_dim)
    return xs, us


def transcribe(spec: OcpSpec) -> NlpProblem:
    """Multiple-shooting NLP: decisions [x_0..x_N, u_0..u_{N-1}].

    Equalities are the initial state (all four components), the RK4 defects
    per interval and any fixed terminal components; a GeneralTerminal
    contributes inequality rows. The objective is the left-rectangle sum
    of the stage cost. Every node carries the bound s >= s_min + 1e-6.
    """
    model = spec.model
    n_int = spec.intervals
    m = model.control_dim
    h = spec.step
    n = 4 * (n_int + 1) + m * n_int
    x0_arr = spec.x0.as_array()
    fixed_terminal = spec.terminal if not isinstance(spec.terminal, GeneralTerminal) else None
    general_terminal = spec.terminal if isinstance(spec.terminal, GeneralTerminal) else None
    n_term = len(fixed_terminal) if fixed_terminal else 0

    value_cache: dict = {}
    jac_cache: dict = {}

    def rk4_values(w: np.ndarray) -> np.ndarray:
        key = w.tobytes()
        if value_cache.get("key") != key:
            xs, us = _split(spec, w)
            nxt = np.empty((n_int, 4))
            for i in range(n_int):
                nxt[i] = _rk4_step_raw(model, xs[i], us[i], h)
            value_cache["key"] = key
            value_cache["val"] = nxt
        return value_cache["val"]

    def rk4_jacs(w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        key = w.tobytes()
        if jac_cache.get("key") != key:
            xs, us = _split(spec, w)
            phis_x = np.empty((n_int, 4, 4))
            phis_u = np.empty((n_int, 4, m))
            for i in range(n_int):
                _, phis_x[i], phis_u[i] = _rk4_with_jac(model, xs[i], us[i], h)
            jac_cache["key"] = key
            jac_cache["val"] = (phis_x, phis_u)
        return jac_cache["val"]

    def objective(w: np.ndarray) -> float:
        xs, us = _split(spec, w)
        return h * sum(spec.cost.value(model, xs[i], us[i]) for i in range(n_int))

    def gradient(w: np.ndarray) -> np.ndarray:
        xs, us = _split(spec, w)
        g = np.zeros(n)
        u_off = 4 * (n_int + 1)
        for i in range(n_int):
            gx, gu = spec.cost.grad(model, xs[i], us[i])
            g[4 * i:4 * i + 4] = h * gx
            g[u_off + m * i:u_off + m * (i + 1)] = h * gu
        return g

    def eq_con(w: np.ndarray) -> np.ndarray:
        xs, us = _split(spec, w)
        nxt = rk4_values(w)
        out = np.empty(4 + 4 * n_int + n_term)
        out[:4] = xs[0] - x0_arr
        out[4:4 + 4 * n_int] = (xs[1:] - nxt).ravel()
        if fixed_terminal:
            for r, (idx, val) in enumerate(fixed_terminal):
                out[4 + 4 * n_int + r] = xs[n_int][idx] - val
        return out

    def eq_jac(w: np.ndarray):
        phis_x, phis_u = rk4_jacs(w)
        rows, cols, data = [], [], []
        for k in range(4):
            rows.append(k)
            cols.append(k)
            data.append(1.0)
        u_off = 4 * (n_int + 1)
        for i in range(n_int):
            r0 = 4 + 4 * i
            for a in range(4):
                rows.append(r0 + a)
                cols.append(4 * (i + 1) + a)
                data.append(1.0)
                for b in range(4):
                    rows.append(r0 + a)
                    cols.append(4 * i + b)
                    data.append(-phis_x[i, a, b])
                for b in range(m):
                    rows.append(r0 + a)
                    cols.append(u_off + m * i + b)
                    data.append(-phis_u[i, a, b])
        if fixed_terminal:
            for r, (idx, _) in enumerate(fixed_terminal):
                rows.append(4 + 4 * n_int + r)
                cols.append(4 * n_int + idx)
                data.append(1.0)
        return sp.coo_matrix((data, (rows, cols)),
                             shape=(4 + 4 * n_int + n_term, n)).tocsr()

    ineq_con = ineq_jac = None
    if general_terminal is not None:
        def ineq_con(w: np.ndarray) -> np.ndarray:
            xs, _ = _split(spec, w)
            return np.atleast_1d(np.asarray(general_terminal.psi(xs[n_int]), dtype=float))

        def ineq_jac(w: np.ndarray):
            xs, _ = _split(spec, w)
            block = np.atleast_2d(np.asarray(general_terminal.psi_jac(xs[n_int]), dtype=float))
            jac = sp.lil_matrix((block.shape[0], n))
            jac[:, 4 * n_int:4 * n_int + 4] = block
            return jac.tocsr()

    lower = np.full(n, -np.inf)
    upper = np.full(n, np.inf)
    lower[0:4 * (n_int + 1):4] = model.s_min + S_BOUND_MARGIN
    if spec.u_lower is not None:
        lower[4 * (n_int + 1):] = np.tile(np.asarray(spec.u_lower, dtype=float), n_int)
    if spec.u_upper is not None:
        upper[4 * (n_int + 1):] = np.tile(np.asarray(spec.u_upper, dtype=float), n_int)

    hess = None
    if getattr(spec.cost, "gn_block", None) is not None:
        def hess(w: np.ndarray):
            xs, us = _split(spec, w)
            u_off = 4 * (n_int + 1)
            rows, cols, data = [], [], []
            for i in range(n_int):
                block = h * spec.cost.gn_block(model, xs[i], us[i])
                idx = np.concatenate([np.arange(4 * i, 4 * i + 4),
                                      np.arange(u_off + m * i, u_off + m * (i + 1))])
                for a in range(4 + m):
                    for b in range(4 + m):
                        if block[a, b] != 0.0:
                            rows.append(idx[a])
                            cols.append(idx[b])
                            data.append(block[a, b])
            return sp.coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()

    return NlpProblem(n=n, objective=objective, gradient=gradient,
                      eq_con=eq_con, eq_jac=eq_jac,
                      ineq_con=ineq_con, ineq_jac=ineq_jac,
                      lower=lower, upper=upper, hess=hess)


def _initial_guess(spec: OcpSpec, warm_start: Trajectory | None) -> np.ndarray:
    n_int = spec.intervals
    m = spec.model.control_dim
    if warm_start is not None:
        times = spec.times()
        xs = np.empty((n_int + 1, 4))
        for k in range(4):
            xs[:, k] = np.interp(times, warm_start.times, warm_start.states[:, k])
        us = np.empty((n_int, m))
        src_t = warm_start.times[:-1]
        for k in range(m):
            us[:, k] = np.interp(times[:-1], src_t, warm_start.controls[:, k])
        return np.concatenate([xs.ravel(), us.ravel()])
    u_ref = getattr(spec.cost, "u_ref", None)
    u_hold = np.zeros(m) if u_ref is None else np.asarray(u_ref, dtype=float)
    xs = np.tile(spec.x0.as_array(), (n_int + 1, 1))
    us = np.tile(u_hold, (n_int, 1))
    return np.concatenate([xs.ravel(), us.ravel()])


def solve_ocp(spec: OcpSpec, opts: SqpOptions | None = None,
              warm_start: Trajectory | None = None) -> OcpSolution:
    """Transcribe and solve; recover costates from defect multipliers.

    Default initial guess holds x0 and the cost's control reference;
    `warm_start` interpolates a prior trajectory onto the grid. Uses the
    Gauss-Newton Hessian when the stage cost provides curvature blocks.
    """
    if opts is None:
        hess_mode = "gauss-newton" if getattr(spec.cost, "gn_block", None) is not None else "bfgs"
        opts = SqpOptions(hessian=hess_mode)
    problem = transcribe(spec)
    sol = solve_sqp(problem, _initial_guess(spec, warm_start), opts)
    xs, us = _split(spec, sol.x_star)
    costates, consistency = recover_costates(spec, sol)
    times = spec.times()
    traj = Trajectory(times=times, states=xs, controls=us, costates=costates)
    stage = np.array([spec.cost.value(spec.model, xs[i], us[i]) for i in range(spec.intervals)])
    defects = np.abs(problem.eq_con(sol.x_star)[4:4 + 4 * spec.intervals])
    return OcpSolution(trajectory=traj, objective=sol.objective,
                       nlp_status=sol.status, kkt=sol.kkt_residuals,
                       stage_costs=stage, defect_max=float(defects.max()),
                       adjoint_consistency=consistency, nlp=sol)


def recover_costates(spec: OcpSpec, sol: NlpSolution) -> tuple[np.ndarray, float]:
    """Map defect multipliers to the costate trajectory.

    lambda_0 = -mu_init and lambda_{i+1} = -mu_defect_i, which makes the
    terminal costate vanish in unconstrained components and the discrete
    adjoint recursion hold to O(h). Returns (costates, worst scaled
    mismatch of that recursion); a large mismatch is logged, not raised.
    """
    from . import nco

    n_int = spec.intervals
    mult = sol.mult_eq
    costates = np.empty((n_int + 1, 4))
    costates[0] = -mult[0:4]
    for i in range(n_int):
        costates[i + 1] = -mult[4 + 4 * i:8 + 4 * i]
    xs, us = _split(spec, sol.x_star)
    h = spec.step
    worst = 0.0
    for i in range(n_int):
        rate = nco.adjoint_rhs(spec.model, spec.cost, xs[i], us[i], costates[i + 1])
        fd = (costates[i + 1] - costates[i]) / h
        worst = max(worst, float(np.max(np.abs(fd - rate)) / (1.0 + np.max(np.abs(rate)))))
    if worst > 100.0 * h:
        log.warning("costate recovery: adjoint recursion mismatch %.3g exceeds O(h)", worst)
    return costates, worst


# --- reduced problem on the trim manifold -------------------------------------

def solve_tocp(model: MechModel, cost, th0: float, v_th0: float, horizon: float,
               intervals: int, s_guess: float,
               opts: SqpOptions | None = None,
               u_lower: np.ndarray | None = None,
               u_upper: np.ndarray | None = None) -> TocpSolution:
    """Solve the reduced problem with the shape coordinate as one scalar.

    Decisions are [s_bar, th_0..th_N, v_0..v_N, u_0..u_{N-1}]; the cyclic
    dynamics integrate by RK4 (exact here, the reduced system is affine)
    and the trim residual is pinned to zero on every interval. Stage costs
    are evaluated at v_s = 0.
    """
    m = model.control_dim
    n_int = intervals
    h = horizon / n_int
    n = 1 + 2 * (n_int + 1) + m * n_int
    th_off = 1
    v_off = 1 + (n_int + 1)
    u_off = 1 + 2 * (n_int + 1)

    def split(w: np.ndarray):
        s_bar = w[0]
        th = w[th_off:th_off + n_int + 1]
        v = w[v_off:v_off + n_int + 1]
        us = w[u_off:].reshape(n_int, m)
        return s_bar, th, v, us

    def beta(s_bar: float, u: np.ndarray) -> float:
        return model.f_th(u) / model.m22(s_bar)

    def objective(w: np.ndarray) -> float:
        s_bar, _, v, us = split(w)
        total = 0.0
        for i in range(n_int):
            total += cost.value(model, np.array([s_bar, 0.0, 0.0, v[i]]), us[i])
        return h * total

    def gradient(w: np.ndarray) -> np.ndarray:
        s_bar, _, v, us = split(w)
        g = np.zeros(n)
        for i in range(n_int):
            gx, gu = cost.grad(model, np.array([s_bar, 0.0, 0.0, v[i]]), us[i])
            g[0] += h * gx[0]
            g[v_off + i] += h * gx[3]
            g[u_off + m * i:u_off + m * (i + 1)] = h * gu
        return g

    def eq_con(w: np.ndarray) -> np.ndarray:
        s_bar, th, v, us = split(w)
        out = np.empty(2 + 2 * n_int + n_int)
        out[0] = th[0] - th0
        out[1] = v[0] - v_th0
        for i in range(n_int):
            b = beta(s_bar, us[i])
            out[2 + 2 * i] = th[i + 1] - (th[i] + h * v[i] + 0.5 * h**2 * b)
            out[3 + 2 * i] = v[i + 1] - (v[i] + h * b)
        for i in range(n_int):
            out[2 + 2 * n_int + i] = trim_residual(model, s_bar, v[i], us[i])
        return out

    def eq_jac(w: np.ndarray):
        s_bar, th, v, us = split(w)
        m22 = model.m22(s_bar)
        m22_inv_d = -model.m22_d(s_bar) / m22**2
        rows, cols, data = [], [], []

        def put(r: int, c: int, val: float) -> None:
            if val != 0.0:
                rows.append(r)
                cols.append(c)
                data.append(val)

        put(0, th_off, 1.0)
        put(1, v_off, 1.0)
        for i in range(n_int):
            f_th = model.f_th(us[i])
            jac_f = np.asarray(model.f_th_jac(us[i]), dtype=float)
            db_ds = m22_inv_d * f_th
            r_th, r_v = 2 + 2 * i, 3 + 2 * i
            put(r_th, th_off + i + 1, 1.0)
            put(r_th, th_off + i, -1.0)
            put(r_th, v_off + i, -h)
            put(r_th, 0, -0.5 * h**2 * db_ds)
            put(r_v, v_off + i + 1, 1.0)
            put(r_v, v_off + i, -1.0)
            put(r_v, 0, -h * db_ds)
            for b_idx in range(m):
                put(r_th, u_off + m * i + b_idx, -0.5 * h**2 * jac_f[b_idx] / m22)
                put(r_v, u_off + m * i + b_idx, -h * jac_f[b_idx] / m22)
        for i in range(n_int):
            dt_s, dt_v, dt_u = trim_residual_grads(model, s_bar, v[i], us[i])
            r = 2 + 2 * n_int + i
            put(r, 0, dt_s)
            put(r, v_off + i, dt_v)
            for b_idx in range(m):
                put(r, u_off + m * i + b_idx, dt_u[b_idx])
        return sp.coo_matrix((data, (rows, cols)),
                             shape=(2 + 3 * n_int, n)).tocsr()

    # Curvature of the squared trim term is inert here (the residual is
    # pinned to zero by the path constraints) and only degrades the QP
    # conditioning, so the Hessian model drops it.
    gn_cost = cost
    if isinstance(cost, TrimPenaltyCost):
        gn_cost = TrimPenaltyCost(w_t=0.0, s_ref=cost.s_ref, u_ref=cost.u_ref,
                                  r=cost.r, s_weight=cost.s_weight)
    hess = None
    if getattr(gn_cost, "gn_block", None) is not None:
        def hess(w: np.ndarray):
            s_bar, _, v, us = split(w)
            rows, cols, data = [], [], []
            for i in range(n_int):
                block = h * gn_cost.gn_block(model, np.array([s_bar, 0.0, 0.0, v[i]]), us[i])
                idx = np.concatenate([[0, v_off + i],
                                      np.arange(u_off + m * i, u_off + m * (i + 1))])
                sub = block[np.ix_([0, 3] + list(range(4, 4 + m)),
                                   [0, 3] + list(range(4, 4 + m)))]
                for a in range(2 + m):
                    for b in range(2 + m):
                        if sub[a, b] != 0.0:
                            rows.append(idx[a])
                            cols.append(idx[b])
                            data.append(sub[a, b])
            return sp.coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()

    lower = np.full(n, -np.inf)
    upper = np.full(n, np.inf)
    lower[0] = model.s_min + S_BOUND_MARGIN
    if u_lower is not None:
        lower[u_off:] = np.tile(np.asarray(u_lower, dtype=float), n_int)
    if u_upper is not None:
        upper[u_off:] = np.tile(np.asarray(u_upper, dtype=float), n_int)

    problem = NlpProblem(n=n, objective=objective, gradient=gradient,
                         eq_con=eq_con, eq_jac=eq_jac,
                         lower=lower, upper=upper, hess=hess)

    times = np.linspace(0.0, horizon, n_int + 1)
    u_ref = getattr(cost, "u_ref", None)
    u_hold = np.zeros(m) if u_ref is None else np.asarray(u_ref, dtype=float)
    w0 = np.concatenate([[s_guess], th0 + v_th0 * times,
                         np.full(n_int + 1, v_th0), np.tile(u_hold, n_int)])

    if opts is None:
        opts = SqpOptions(hessian="gauss-newton" if hess is not None else "bfgs")
    sol = solve_sqp(problem, w0, opts)
    s_bar, th, v, us = split(sol.x_star)
    mult = sol.mult_eq
    l_th = np.empty(n_int + 1)
    l_v = np.empty(n_int + 1)
    l_th[0], l_v[0] = -mult[0], -mult[1]
    for i in range(n_int):
        l_th[i + 1] = -mult[2 + 2 * i]
        l_v[i + 1] = -mult[3 + 2 * i]
    # Path-constraint multipliers scale by 1/h to estimate the continuous one.
    l_trim = mult[2 + 2 * n_int:] / h
    stage = np.array([cost.value(model, np.array([s_bar, 0.0, 0.0, v[i]]), us[i])
                      for i in range(n_int)])
    return TocpSolution(s_bar=float(s_bar), times=times, th_bar=th.copy(),
                        v_bar=v.copy(), u_bar=us.copy(), l_th_bar=l_th,
                        l_vth_bar=l_v, l_trim=l_trim.copy(),
                        objective=sol.objective, nlp_status=sol.status,
                        kkt=sol.kkt_residuals, stage_costs=stage, nlp=sol)


# --- steady-state trim optimization -------------------------------------------

def solve_sop(model: MechModel, cost, guess: Sequence[float],
              opts: SqpOptions | None = None) -> SopSolution:
    """Minimize the stage cost over trim triples (s, v_th, u) with T = 0.

    Stated for orthogonally forced systems; when the model's cyclic forcing
    does not vanish at the optimizer the returned triple is not a steady
    state of the full dynamics and `cyclic_forcing` records f_th(u_bar)
    (a warning is logged).
    """
    from . import nco

    m = model.control_dim
    guess = np.asarray(guess, dtype=float)
    if guess.shape != (2 + m,):
        raise ValueError(f"guess must be (s, v_th, u_1..u_{m})")

    def objective(y: np.ndarray) -> float:
        return cost.value(model, np.array([y[0], 0.0, 0.0, y[1]]), y[2:])

    def gradient(y: np.ndarray) -> np.ndarray:
        gx, gu = cost.grad(model, np.array([y[0], 0.0, 0.0, y[1]]), y[2:])
        return np.concatenate([[gx[0], gx[3]], gu])

    def eq_con(y: np.ndarray) -> np.ndarray:
        return np.array([trim_residual(model, y[0], y[1], y[2:])])

    def eq_jac(y: np.ndarray) -> np.ndarray:
        dt_s, dt_v, dt_u = trim_residual_grads(model, y[0], y[1], y[2:])
        return np.concatenate([[dt_s, dt_v], dt_u]).reshape(1, -1)

    lower = np.full(2 + m, -np.inf)
    lower[0] = model.s_min + S_BOUND_MARGIN
    problem = NlpProblem(n=2 + m, objective=objective, gradient=gradient,
                         eq_con=eq_con, eq_jac=eq_jac, lower=lower)
    opts = opts or SqpOptions(tol=1e-11, max_iter=300)
    sol = solve_sqp(problem, guess, opts)
    y = sol.x_star
    lam = float(sol.mult_eq[0])
    report = nco.sop_stationarity_residuals(model, cost, y[0], y[1], y[2:], lam)
    forcing = float(model.f_th(y[2:]))
    if not model.orthogonal_forcing and abs(forcing) > 1e-8:
        log.warning("steady-state optimum excites cyclic forcing f_th=%.3g; "
                    "not a steady state of the full dynamics", forcing)
    return SopSolution(s_bar=float(y[0]), v_theta_bar=float(y[1]), u_bar=y[2:].copy(),
                       lam=lam, residuals=report,
                       trim_value=float(trim_residual(model, y[0], y[1], y[2:])),
                       cyclic_forcing=forcing, nlp_status=sol.status, nlp=sol)


# --- JSON codec ---------------------------------------------------------------

def _cost_to_dict(cost) -> dict:
    if isinstance(cost, QuadraticCost):
        return {"type": "quadratic", "x_ref": cost.x_ref.tolist(), "q": cost.q.tolist(),
                "u_ref": cost.u_ref.tolist(), "r": cost.r.tolist()}
    if isinstance(cost, TrimPenaltyCost):
        return {"type": "trim_penalty", "w_t": cost.w_t, "s_ref": cost.s_ref,
                "s_weight": cost.s_weight, "u_ref": cost.u_ref.tolist(),
                "r": cost.r.tolist()}
    raise ValueError(f"cost {type(cost).__name__} has no JSON form")


def _cost_from_dict(doc: dict):
    kind = doc["type"]
    if kind == "quadratic":
        return QuadraticCost(x_ref=np.array(doc["x_ref"]), q=np.array(doc["q"]),
                             u_ref=np.array(doc["u_ref"]), r=np.array(doc["r"]))
    if kind == "trim_penalty":
        return TrimPenaltyCost(w_t=doc["w_t"], s_ref=doc["s_ref"],
                               s_weight=doc.get("s_weight", 1.0),
                               u_ref=np.array(doc["u_ref"]), r=np.array(doc["r"]))
    raise ValueError(f"unknown cost type {kind!r}")


def spec_to_dict(spec: OcpSpec) -> dict:
    """JSON-ready document for a spec built from a registered model."""
    if spec.model_doc is None:
        raise ValueError("spec has no model_doc; only registry-built models serialize")
    if isinstance(spec.terminal, GeneralTerminal):
        raise ValueError("general terminal constraints have no JSON form")
    return {
        "model": spec.model_doc,
        "horizon": spec.horizon,
        "intervals": spec.intervals,
        "cost": _cost_to_dict(spec.cost),
        "x0": spec.x0.as_array().tolist(),
        "terminal": [list(c) for c in spec.terminal] if spec.terminal else None,
        "bounds": {
            "u_lower": None if spec.u_lower is None else np.asarray(spec.u_lower).tolist(),
            "u_upper": None if spec.u_upper is None else np.asarray(spec.u_upper).tolist(),
        },
    }


def spec_from_dict(doc: dict, model_registry: dict) -> OcpSpec:
    """Rebuild a spec; `model_registry` maps model names to constructors."""
    model_doc = doc["model"]
    name = model_doc["name"]
    if name not in model_registry:
        raise ValueError(f"unknown model {name!r}")
    model = model_registry[name](**model_doc.get("params", {}))
    bounds = doc.get("bounds") or {}
    return OcpSpec(
        model=model,
        horizon=doc["horizon"],
        intervals=doc["intervals"],
        cost=_cost_from_dict(doc["cost"]),
        x0=State.from_array(doc["x0"]),
        terminal=[tuple(c) for c in doc["terminal"]] if doc.get("terminal") else None,
        u_lower=None if bounds.get("u_lower") is None else np.array(bounds["u_lower"]),
        u_upper=None if bounds.get("u_upper") is None else np.array(bounds["u_upper"]),
        model_doc=model_doc,
    )
