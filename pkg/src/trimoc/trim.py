"""Trim primitives: residual, amended-potential view, solving and distance.

A trim is a controlled relative equilibrium: constant shape, zero shape
velocity, constant cyclic velocity and constant control. The scalar trim
residual characterizes them; its zero set (together with v_s = 0) is the
trim manifold.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .model import MechModel, State, Trajectory

__all__ = [
    "TrimSolveError",
    "TrimPoint",
    "AmendedPotentialPoint",
    "trim_residual",
    "trim_residual_grads",
    "forced_potential",
    "forced_amended_potential",
    "solve_trim",
    "trim_trajectory",
    "manifold_distance",
    "combined_residual",
]

log = logging.getLogger(__name__)

NEWTON_TOL = 1e-10
NEWTON_MAX_ITER = 50
NEWTON_MAX_HALVINGS = 20


class TrimSolveError(RuntimeError):
    """Newton iteration on the trim residual failed."""


@dataclass(frozen=True)
class TrimPoint:
    """Trim triple (s, v_th, u) with its stored residual magnitude."""

    s: float
    v_th: float
    u: np.ndarray
    residual: float
    trim_tol: float = NEWTON_TOL
    iterations: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "u", np.asarray(self.u, dtype=float))
        if abs(self.residual) > self.trim_tol:
            raise ValueError(
                f"residual {self.residual!r} exceeds trim tolerance {self.trim_tol!r}"
            )

    def to_json(self) -> str:
        return json.dumps({"s": self.s, "v_theta": self.v_th,
                           "u": list(map(float, self.u)), "residual": self.residual})

    @staticmethod
    def from_json(text: str) -> "TrimPoint":
        doc = json.loads(text)
        return TrimPoint(doc["s"], doc["v_theta"], np.array(doc["u"]), doc["residual"])


@dataclass(frozen=True)
class AmendedPotentialPoint:
    """Point (s, mu, u) in the domain of the forced amended potential."""

    s: float
    mu: float
    u: np.ndarray


def trim_residual(model: MechModel, s: float, v_th: float, u: np.ndarray) -> float:
    """Shape acceleration at v_s = 0; zero exactly on trim triples."""
    u = np.asarray(u, dtype=float)
    return (0.5 * model.m22_d(s) * v_th**2 - model.pot_d(s) + model.f_s(u)) / model.m11(s)


def trim_residual_grads(model: MechModel, s: float, v_th: float,
                        u: np.ndarray) -> tuple[float, float, np.ndarray]:
    """Partial derivatives of the trim residual w.r.t. (s, v_th, u)."""
    u = np.asarray(u, dtype=float)
    m11 = model.m11(s)
    m11_inv_d = -model.m11_d(s) / m11**2
    force = 0.5 * model.m22_d(s) * v_th**2 - model.pot_d(s) + model.f_s(u)
    d_s = m11_inv_d * force + (0.5 * model.m22_dd(s) * v_th**2 - model.pot_dd(s)) / m11
    d_vth = model.m22_d(s) * v_th / m11
    d_u = np.asarray(model.f_s_jac(u), dtype=float) / m11
    return d_s, d_vth, d_u


def forced_potential(model: MechModel, s: float, u: np.ndarray) -> float:
    """Potential minus the work term s * f_s(u)."""
    return model.pot(s) - s * model.f_s(np.asarray(u, dtype=float))


def forced_amended_potential(model: MechModel, s: float, mu: float,
                             u: np.ndarray) -> tuple[float, float]:
    """Forced amended potential and its s-gradient at momentum level mu.

    Returns (value, gradient). Critical points in s are exactly the trim
    triples with v_th = mu / M22(s).
    """
    u = np.asarray(u, dtype=float)
    m22 = model.m22(s)
    value = forced_potential(model, s, u) + 0.5 * mu**2 / m22
    m22_inv_d = -model.m22_d(s) / m22**2
    grad = model.pot_d(s) + 0.5 * mu**2 * m22_inv_d - model.f_s(u)
    return value, grad


def solve_trim(model: MechModel, fixed: Mapping[str, object], guess: float = 1.0,
               max_iter: int = NEWTON_MAX_ITER, tol: float = NEWTON_TOL) -> TrimPoint:
    """Solve the trim residual for the single free unknown.

    `fixed` assigns two of {s, v_th, u}; the missing one is solved for.
    When s and v_th are both fixed, `fixed["u"]` must be a sequence with
    exactly one None entry marking the free control component. Newton
    iteration with step halving; |residual| <= tol on success.
    """
    if "s" not in fixed:
        if "v_th" not in fixed or "u" not in fixed:
            raise ValueError("solving for s requires fixed v_th and u")
        v_th = float(fixed["v_th"])  # type: ignore[arg-type]
        u = np.asarray(fixed["u"], dtype=float)

        def residual(x: float) -> float:
            return trim_residual(model, x, v_th, u)

        def slope(x: float) -> float:
            return trim_residual_grads(model, x, v_th, u)[0]

        s, iters = _newton_scalar(residual, slope, guess, max_iter, tol,
                                  lower=model.s_min + 1e-9)
        return TrimPoint(s, v_th, u, trim_residual(model, s, v_th, u), tol, iters)

    if "v_th" not in fixed:
        if "u" not in fixed:
            raise ValueError("solving for v_th requires fixed s and u")
        s = float(fixed["s"])  # type: ignore[arg-type]
        u = np.asarray(fixed["u"], dtype=float)

        def residual(x: float) -> float:
            return trim_residual(model, s, x, u)

        def slope(x: float) -> float:
            return trim_residual_grads(model, s, x, u)[1]

        v_th, iters = _newton_scalar(residual, slope, guess, max_iter, tol)
        return TrimPoint(s, v_th, u, trim_residual(model, s, v_th, u), tol, iters)

    s = float(fixed["s"])  # type: ignore[arg-type]
    v_th = float(fixed["v_th"])  # type: ignore[arg-type]
    u_spec = list(fixed.get("u", ()))
    free = [j for j, val in enumerate(u_spec) if val is None]
    if len(u_spec) != model.control_dim or len(free) != 1:
        raise ValueError(
            "with s and v_th fixed, u must list all components with exactly one None"
        )
    j = free[0]
    u = np.array([0.0 if val is None else float(val) for val in u_spec])

    def residual(x: float) -> float:
        u[j] = x
        return trim_residual(model, s, v_th, u)

    def slope(x: float) -> float:
        u[j] = x
        return float(trim_residual_grads(model, s, v_th, u)[2][j])

    u_j, iters = _newton_scalar(residual, slope, guess, max_iter, tol)
    u[j] = u_j
    return TrimPoint(s, v_th, u, trim_residual(model, s, v_th, u), tol, iters)


def _newton_scalar(residual, slope, x0: float, max_iter: int, tol: float,
                   lower: float | None = None) -> tuple[float, int]:
    x = float(x0)
    r = residual(x)
    for it in range(max_iter):
        if abs(r) <= tol:
            return x, it
        dr = slope(x)
        if dr == 0.0 or not np.isfinite(dr):
            raise TrimSolveError(f"singular Newton step at x={x!r} (residual {r!r})")
        step = -r / dr
        # Damp by halving while the residual grows or the domain is violated.
        for _ in range(NEWTON_MAX_HALVINGS):
            x_new = x + step
            if lower is not None and x_new <= lower:
                step *= 0.5
                continue
            r_new = residual(x_new)
            if np.isfinite(r_new) and abs(r_new) <= abs(r):
                break
            step *= 0.5
        else:
            raise TrimSolveError(f"step damping failed at x={x!r} (residual {r!r})")
        x, r = x_new, r_new
    if abs(r) <= tol:
        return x, max_iter
    raise TrimSolveError(f"no convergence after {max_iter} iterations (residual {r!r})")


def trim_trajectory(tp: TrimPoint, model: MechModel, th0: float,
                    times: np.ndarray) -> Trajectory:
    """Closed-form trim trajectory seeded at (tp.s, 0, th0, tp.v_th)."""
    times = np.asarray(times, dtype=float)
    if not model.orthogonal_forcing and abs(model.f_th(tp.u)) > 1e-12:
        warnings.warn(
            "trim control excites the cyclic forcing; trajectory is not an exact solution",
            stacklevel=2,
        )
    states = np.column_stack([
        np.full_like(times, tp.s),
        np.zeros_like(times),
        th0 + tp.v_th * times,
        np.full_like(times, tp.v_th),
    ])
    controls = np.tile(tp.u, (max(len(times) - 1, 0), 1))
    return Trajectory(times=times, states=states, controls=controls)


def manifold_distance(model: MechModel, x: State) -> float:
    """Distance surrogate from x to the trim manifold.

    With surjective shape forcing the manifold is {v_s = 0} and the
    distance is |v_s|. Otherwise |v_s| + |min_u T| is used, the minimum
    approximated by Gauss-Newton in u with a grid-scan fallback; this
    fallback is an implementation surrogate, not the set distance.
    """
    if model.forcing_surjective:
        return abs(x.v_s)
    return abs(x.v_s) + abs(_min_abs_residual(model, x.s, x.v_th))


def _min_abs_residual(model: MechModel, s: float, v_th: float) -> float:
    u = np.zeros(model.control_dim)
    r = trim_residual(model, s, v_th, u)
    for _ in range(NEWTON_MAX_ITER):
        if abs(r) <= NEWTON_TOL:
            return r
        jac = np.asarray(model.f_s_jac(u), dtype=float) / model.m11(s)
        denom = float(jac @ jac)
        if denom <= 1e-300:
            break
        step = -r * jac / denom
        for _ in range(NEWTON_MAX_HALVINGS):
            r_new = trim_residual(model, s, v_th, u + step)
            if np.isfinite(r_new) and abs(r_new) <= abs(r):
                break
            step *= 0.5
        else:
            break
        u = u + step
        r = r_new
    else:
        return r
    # Gauss-Newton stalled: coarse grid scan around the best iterate.
    log.warning("trim-residual minimization fell back to a grid scan at s=%g", s)
    span = 1.0 + 10.0 * abs(r)
    best = r
    grid = np.linspace(-span, span, 41)
    if model.control_dim == 1:
        candidates = grid[:, None]
    else:
        axes = [grid if j < 2 else np.array([0.0]) for j in range(model.control_dim)]
        candidates = np.stack([g.ravel() for g in np.meshgrid(*axes)], axis=-1)
    for du in candidates:
        r_try = trim_residual(model, s, v_th, u + du)
        if abs(r_try) < abs(best):
            best = r_try
    return best


def combined_residual(model: MechModel, x: State, u: np.ndarray, w: float = 1.0) -> float:
    """Dwell-analysis residual sqrt(v_s^2 + w * T(s, v_th, u)^2)."""
    t_res = trim_residual(model, x.s, x.v_th, np.asarray(u, dtype=float))
    return float(np.sqrt(x.v_s**2 + w * t_res**2))
