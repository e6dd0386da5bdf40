"""Mechanical model with one shape and one cyclic coordinate.

The configuration is q = (s, theta) where the mass-matrix blocks and the
potential depend on s only. State order throughout the package is
(s, v_s, theta, v_theta); momentum coordinates are (s, p_s, theta, p_theta).
Provides the first-order equations of motion in velocity and momentum form,
the Legendre map between them, conserved momentum, fixed-step RK4
integration and CSV (de)serialization of trajectories.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DomainError",
    "MechModel",
    "State",
    "CoState",
    "HamState",
    "Trajectory",
    "el_rhs",
    "el_jacobians",
    "ham_rhs",
    "legendre_to_ham",
    "legendre_to_el",
    "legendre_jacobian",
    "lagrangian",
    "hamiltonian_energy",
    "momentum",
    "rk4_step",
    "simulate",
    "check_derivatives",
    "trajectory_to_csv",
    "trajectory_from_csv",
]


class DomainError(ValueError):
    """Shape coordinate left the model's admissible domain s > s_min."""


ScalarFn = Callable[[float], float]
ControlFn = Callable[[np.ndarray], float]
ControlJacFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class MechModel:
    """Callable bundle defining the system: mass blocks, potential, forcing.

    All scalar functions take the shape coordinate s; derivative suffixes
    `_d` / `_dd` are first/second s-derivatives supplied analytically
    (`check_derivatives` validates them against finite differences).
    `f_s` / `f_th` map a control vector u in R^m to the shape / cyclic
    generalized force; their `_jac` companions return the u-gradient row
    of length m.
    """

    m11: ScalarFn
    m11_d: ScalarFn
    m11_dd: ScalarFn
    m22: ScalarFn
    m22_d: ScalarFn
    m22_dd: ScalarFn
    pot: ScalarFn
    pot_d: ScalarFn
    pot_dd: ScalarFn
    f_s: ControlFn
    f_s_jac: ControlJacFn
    f_th: ControlFn
    f_th_jac: ControlJacFn
    control_dim: int
    s_min: float = 0.0
    # True when f_s can reach any real value, collapsing the trim manifold
    # to {v_s = 0}; used by the manifold distance.
    forcing_surjective: bool = False
    # True when f_th vanishes identically (orthogonal forcing).
    orthogonal_forcing: bool = False

    def __post_init__(self) -> None:
        if self.control_dim < 1:
            raise ValueError(f"control_dim must be positive, got {self.control_dim}")

    def require_domain(self, s: float, context: str = "") -> None:
        if not s > self.s_min:
            where = f" during {context}" if context else ""
            raise DomainError(
                f"shape coordinate s={s!r} violates s > s_min={self.s_min!r}{where}"
            )


@dataclass(frozen=True)
class State:
    """Point in velocity coordinates (s, v_s, theta, v_theta)."""

    s: float
    v_s: float
    th: float
    v_th: float

    def as_array(self) -> np.ndarray:
        return np.array([self.s, self.v_s, self.th, self.v_th], dtype=float)

    @staticmethod
    def from_array(x: Sequence[float]) -> "State":
        return State(float(x[0]), float(x[1]), float(x[2]), float(x[3]))


@dataclass(frozen=True)
class CoState:
    """Adjoint point (l_s, l_vs, l_th, l_vth) paired with a State."""

    l_s: float
    l_vs: float
    l_th: float
    l_vth: float

    def as_array(self) -> np.ndarray:
        return np.array([self.l_s, self.l_vs, self.l_th, self.l_vth], dtype=float)

    @staticmethod
    def from_array(lam: Sequence[float]) -> "CoState":
        return CoState(float(lam[0]), float(lam[1]), float(lam[2]), float(lam[3]))


@dataclass(frozen=True)
class HamState:
    """Point in momentum coordinates (s, p_s, theta, p_theta)."""

    s: float
    p_s: float
    th: float
    p_th: float

    def as_array(self) -> np.ndarray:
        return np.array([self.s, self.p_s, self.th, self.p_th], dtype=float)

    @staticmethod
    def from_array(z: Sequence[float]) -> "HamState":
        return HamState(float(z[0]), float(z[1]), float(z[2]), float(z[3]))


@dataclass(frozen=True)
class Trajectory:
    """Grid trajectory: times (N+1,), states (N+1, 4), controls (N, m).

    Controls are piecewise constant per interval. Costates, when present,
    are one per node like the states.
    """

    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    costates: np.ndarray | None = None

    def __post_init__(self) -> None:
        times = np.asarray(self.times, dtype=float)
        states = np.atleast_2d(np.asarray(self.states, dtype=float))
        controls = np.asarray(self.controls, dtype=float)
        if controls.ndim == 1:
            controls = controls.reshape(len(times) - 1, -1) if controls.size else controls.reshape(0, 1)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "controls", controls)
        if self.costates is not None:
            object.__setattr__(self, "costates", np.atleast_2d(np.asarray(self.costates, dtype=float)))
        if len(states) != len(times):
            raise ValueError(f"{len(states)} states for {len(times)} grid nodes")
        if len(times) > 1 and not np.all(np.diff(times) > 0):
            raise ValueError("time grid must be strictly increasing")
        if len(controls) != max(len(times) - 1, 0):
            raise ValueError(f"{len(controls)} control intervals for {len(times)} nodes")
        if self.costates is not None and len(self.costates) != len(times):
            raise ValueError("costates must have one row per node")

    @property
    def n_nodes(self) -> int:
        return len(self.times)

    def state(self, i: int) -> State:
        return State.from_array(self.states[i])


def el_rhs(model: MechModel, x: State | np.ndarray, u: np.ndarray) -> np.ndarray:
    """Right-hand side of the first-order equations in velocity coordinates."""
    s, v_s, _, v_th = np.asarray(x.as_array() if isinstance(x, State) else x, dtype=float)
    u = np.asarray(u, dtype=float)
    if u.shape != (model.control_dim,):
        raise ValueError(f"control has shape {u.shape}, expected ({model.control_dim},)")
    model.require_domain(s)
    return _el_rhs_raw(model, s, v_s, v_th, u)


def _el_rhs_raw(model: MechModel, s: float, v_s: float, v_th: float, u: np.ndarray) -> np.ndarray:
    m11 = model.m11(s)
    m22_d = model.m22_d(s)
    acc_s = (0.5 * m22_d * v_th**2 - 0.5 * model.m11_d(s) * v_s**2
             - model.pot_d(s) + model.f_s(u)) / m11
    acc_th = (-m22_d * v_th * v_s + model.f_th(u)) / model.m22(s)
    return np.array([v_s, acc_s, v_th, acc_th])


def el_jacobians(model: MechModel, x: State | np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """State and control Jacobians (A, B) of el_rhs at (x, u).

    A is 4x4 with zero theta-column (the dynamics are cyclic in theta);
    B is 4xm through the forcing Jacobians.
    """
    s, v_s, _, v_th = np.asarray(x.as_array() if isinstance(x, State) else x, dtype=float)
    u = np.asarray(u, dtype=float)
    m11 = model.m11(s)
    m11_d = model.m11_d(s)
    m22 = model.m22(s)
    m22_d = model.m22_d(s)
    m11_inv_d = -m11_d / m11**2
    m22_inv_d = -m22_d / m22**2

    force_s = 0.5 * m22_d * v_th**2 - 0.5 * m11_d * v_s**2 - model.pot_d(s) + model.f_s(u)
    l1 = m11_inv_d * force_s + (0.5 * model.m22_dd(s) * v_th**2
                                - 0.5 * model.m11_dd(s) * v_s**2
                                - model.pot_dd(s)) / m11
    l2 = (-m22_inv_d * m22_d * v_th * v_s
          - model.m22_dd(s) * v_th * v_s / m22
          + m22_inv_d * model.f_th(u))

    a = np.array([
        [0.0, 1.0, 0.0, 0.0],
        [l1, -m11_d * v_s / m11, 0.0, m22_d * v_th / m11],
        [0.0, 0.0, 0.0, 1.0],
        [l2, -m22_d * v_th / m22, 0.0, -m22_d * v_s / m22],
    ])
    b = np.zeros((4, model.control_dim))
    b[1] = np.asarray(model.f_s_jac(u), dtype=float) / m11
    b[3] = np.asarray(model.f_th_jac(u), dtype=float) / m22
    return a, b


def ham_rhs(model: MechModel, z: HamState | np.ndarray, u: np.ndarray) -> np.ndarray:
    """Right-hand side in momentum coordinates (s, p_s, theta, p_theta)."""
    s, p_s, _, p_th = np.asarray(z.as_array() if isinstance(z, HamState) else z, dtype=float)
    u = np.asarray(u, dtype=float)
    model.require_domain(s)
    m11 = model.m11(s)
    m22 = model.m22(s)
    m11_inv_d = -model.m11_d(s) / m11**2
    m22_inv_d = -model.m22_d(s) / m22**2
    dp_s = (-0.5 * m11_inv_d * p_s**2 - 0.5 * m22_inv_d * p_th**2
            - model.pot_d(s) + model.f_s(u))
    return np.array([p_s / m11, dp_s, p_th / m22, model.f_th(u)])


def legendre_to_ham(model: MechModel, x: State) -> HamState:
    """Velocity-to-momentum coordinate change p = M(s) v."""
    model.require_domain(x.s)
    return HamState(x.s, model.m11(x.s) * x.v_s, x.th, model.m22(x.s) * x.v_th)


def legendre_to_el(model: MechModel, z: HamState) -> State:
    """Momentum-to-velocity coordinate change v = M(s)^-1 p."""
    model.require_domain(z.s)
    return State(z.s, z.p_s / model.m11(z.s), z.th, z.p_th / model.m22(z.s))


def legendre_jacobian(model: MechModel, x: State) -> np.ndarray:
    """Jacobian of the velocity-to-momentum map at x."""
    m11_d = model.m11_d(x.s)
    m22_d = model.m22_d(x.s)
    return np.array([
        [1.0, 0.0, 0.0, 0.0],
        [m11_d * x.v_s, model.m11(x.s), 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [m22_d * x.v_th, 0.0, 0.0, model.m22(x.s)],
    ])


def lagrangian(model: MechModel, x: State) -> float:
    """Kinetic minus potential energy at x."""
    model.require_domain(x.s)
    return 0.5 * (model.m11(x.s) * x.v_s**2 + model.m22(x.s) * x.v_th**2) - model.pot(x.s)


def hamiltonian_energy(model: MechModel, z: HamState) -> float:
    """Total energy in momentum coordinates."""
    model.require_domain(z.s)
    return 0.5 * (z.p_s**2 / model.m11(z.s) + z.p_th**2 / model.m22(z.s)) + model.pot(z.s)


def momentum(model: MechModel, x: State) -> float:
    """Conjugate momentum of the cyclic coordinate, M22(s) v_theta.

    Invariant along unforced-cyclic motions (f_th = 0).
    """
    return model.m22(x.s) * x.v_th


def rk4_step(model: MechModel, x: State, u: np.ndarray, h: float) -> State:
    """Classical fourth-order Runge-Kutta step with constant control."""
    if h <= 0:
        raise ValueError(f"step size must be positive, got {h}")
    u = np.asarray(u, dtype=float)
    x0 = x.as_array()
    model.require_domain(x0[0])
    return State.from_array(_rk4_step_raw(model, x0, u, h))


def _rk4_step_raw(model: MechModel, x0: np.ndarray, u: np.ndarray, h: float) -> np.ndarray:
    k1 = _el_rhs_raw(model, x0[0], x0[1], x0[3], u)
    x1 = x0 + 0.5 * h * k1
    k2 = _el_rhs_raw(model, x1[0], x1[1], x1[3], u)
    x2 = x0 + 0.5 * h * k2
    k3 = _el_rhs_raw(model, x2[0], x2[1], x2[3], u)
    x3 = x0 + h * k3
    k4 = _el_rhs_raw(model, x3[0], x3[1], x3[3], u)
    return x0 + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def simulate(model: MechModel, x0: State, controls: np.ndarray, times: np.ndarray) -> Trajectory:
    """Integrate from x0 along a time grid with piecewise-constant controls.

    `controls` holds one control vector per grid interval. A zero-length
    grid (a single node) yields a trajectory containing only x0.
    """
    times = np.asarray(times, dtype=float)
    controls = np.asarray(controls, dtype=float).reshape(max(len(times) - 1, 0), model.control_dim)
    states = np.empty((len(times), 4))
    states[0] = x0.as_array()
    model.require_domain(x0.s, context="simulate at t=%g" % times[0])
    for i in range(len(times) - 1):
        h = times[i + 1] - times[i]
        nxt = _rk4_step_raw(model, states[i], controls[i], h)
        if not nxt[0] > model.s_min or not np.all(np.isfinite(nxt)):
            raise DomainError(
                f"domain exit at t={times[i + 1]:g}: s={nxt[0]!r} (s_min={model.s_min})"
            )
        states[i + 1] = nxt
    return Trajectory(times=times, states=states, controls=controls)


def check_derivatives(model: MechModel, samples: int = 25, tol: float = 1e-5,
                      s_range: tuple[float, float] | None = None,
                      u_scale: float = 1.0, seed: int = 0) -> dict:
    """Validate supplied analytic derivatives against central differences.

    Samples s uniformly on `s_range` (default (s_min + 0.5, s_min + 10)) and
    controls from a normal of scale `u_scale`. Report-only: returns a dict
    with per-function violation records, never raises.
    """
    rng = np.random.default_rng(seed)
    lo, hi = s_range if s_range is not None else (model.s_min + 0.5, model.s_min + 10.0)
    violations: list[dict] = []

    def rel_err(analytic: float, fd: float) -> float:
        return abs(analytic - fd) / (1.0 + abs(fd))

    pairs = [
        ("m11_d", model.m11, model.m11_d),
        ("m22_d", model.m22, model.m22_d),
        ("pot_d", model.pot, model.pot_d),
        ("m11_dd", model.m11_d, model.m11_dd),
        ("m22_dd", model.m22_d, model.m22_dd),
        ("pot_dd", model.pot_d, model.pot_dd),
    ]
    for _ in range(samples):
        s = float(rng.uniform(lo, hi))
        hstep = 1e-6 * (1.0 + abs(s))
        for name, base, deriv in pairs:
            fd = (base(s + hstep) - base(s - hstep)) / (2.0 * hstep)
            err = rel_err(deriv(s), fd)
            if err > tol:
                violations.append({"function": name, "s": s, "analytic": deriv(s),
                                   "fd": fd, "rel_err": err})
        u = rng.normal(scale=u_scale, size=model.control_dim)
        for name, base, jac in [("f_s_jac", model.f_s, model.f_s_jac),
                                ("f_th_jac", model.f_th, model.f_th_jac)]:
            row = np.asarray(jac(u), dtype=float)
            for j in range(model.control_dim):
                du = np.zeros(model.control_dim)
                du[j] = 1e-6 * (1.0 + abs(u[j]))
                fd = (base(u + du) - base(u - du)) / (2.0 * du[j])
                err = rel_err(row[j], fd)
                if err > tol:
                    violations.append({"function": name, "u": u.tolist(), "component": j,
                                       "analytic": float(row[j]), "fd": fd, "rel_err": err})
    return {"samples": samples, "tol": tol, "violations": violations,
            "passed": not violations}


def trajectory_to_csv(traj: Trajectory, path) -> None:
    """Write a trajectory as CSV with round-trip float formatting.

    Header: t,s,v_s,theta,v_theta[,u_1..u_m][,l_s,l_vs,l_th,l_vth].
    Control cells are empty on the final node (controls live on intervals).
    """
    m = traj.controls.shape[1] if traj.controls.size else 0
    header = ["t", "s", "v_s", "theta", "v_theta"]
    header += [f"u_{j + 1}" for j in range(m)]
    if traj.costates is not None:
        header += ["l_s", "l_vs", "l_th", "l_vth"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(traj.n_nodes):
            row = [repr(float(traj.times[i]))]
            row += [repr(float(v)) for v in traj.states[i]]
            if i < len(traj.controls):
                row += [repr(float(v)) for v in traj.controls[i]]
            else:
                row += [""] * m
            if traj.costates is not None:
                row += [repr(float(v)) for v in traj.costates[i]]
            writer.writerow(row)


def trajectory_from_csv(path) -> Trajectory:
    """Read a trajectory written by trajectory_to_csv."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader if r]
    m = sum(1 for name in header if name.startswith("u_"))
    has_costates = "l_s" in header
    times, states, controls, costates = [], [], [], []
    for i, row in enumerate(rows):
        times.append(float(row[0]))
        states.append([float(v) for v in row[1:5]])
        u_cells = row[5:5 + m]
        if m and all(cell != "" for cell in u_cells):
            controls.append([float(v) for v in u_cells])
        if has_costates:
            costates.append([float(v) for v in row[5 + m:9 + m]])
    return Trajectory(
        times=np.array(times),
        states=np.array(states),
        controls=np.array(controls).reshape(len(controls), m) if m else np.zeros((len(times) - 1, 0)),
        costates=np.array(costates) if has_costates else None,
    )
