"""Numerical certification of manifold-turnpike behavior.

Quantifies how long computed optimal trajectories spend outside an
epsilon-tube around the trim manifold, certifies a strict-dissipativity
inequality over a quadratic comparison-function family with constant
storage, probes cost controllability, and evaluates average cost. The
underlying theorems are not re-proved; their inequalities are checked
along solver output.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .model import Trajectory
from .nlp import NlpProblem, SqpOptions, solve_sqp
from .ocp import OcpSolution, OcpSpec, solve_ocp

__all__ = [
    "TurnpikeReport",
    "ScanResult",
    "DissipativityCertificate",
    "CostControllabilityProbe",
    "dwell_measure",
    "turnpike_scan",
    "dissipativity_margin",
    "fit_max_dissipation_rate",
    "theorem_dwell_bound",
    "cost_controllability_probe",
    "average_cost",
]

log = logging.getLogger(__name__)


@dataclass
class TurnpikeReport:
    """Time spent outside the epsilon-tube, with the excursion intervals."""

    epsilon: float
    dwell_measure: float
    excursions: list
    horizon: float
    bound_estimate: float | None = None

    def to_json(self) -> str:
        return json.dumps({
            "epsilon": self.epsilon,
            "dwell_measure": self.dwell_measure,
            "excursions": [list(iv) for iv in self.excursions],
            "horizon": self.horizon,
            "bound_estimate": self.bound_estimate,
        }, indent=2)


@dataclass
class ScanResult:
    horizons: list
    reports: list
    objectives: list
    statuses: list
    solutions: list
    bounded: bool | None
    verdict: str

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["T", "dwell", "epsilon", "objective"])
            for horizon, report, obj in zip(self.horizons, self.reports, self.objectives):
                writer.writerow([horizon, report.dwell_measure, report.epsilon, obj])

    def to_json(self) -> str:
        return json.dumps({
            "horizons": self.horizons,
            "dwell": [r.dwell_measure for r in self.reports],
            "objectives": self.objectives,
            "statuses": self.statuses,
            "bounded": self.bounded,
            "verdict": self.verdict,
        }, indent=2)


@dataclass
class DissipativityCertificate:
    """Constant-storage, quadratic-rate dissipation check over prefixes.

    The comparison function is alpha(r) = c r^2 and the storage is the
    constant s0; `worst_margin` is the minimum over all trajectory
    prefixes of integral(cost - c dist^2) + s0. The certificate covers the
    sampled trajectories only, recorded in `sample_count`.
    """

    c: float
    s0: float
    worst_margin: float
    horizons: list
    sample_count: int
    tol: float = 1e-6

    @property
    def valid(self) -> bool:
        return self.worst_margin >= -self.tol

    def to_json(self) -> str:
        return json.dumps({
            "alpha_coefficient": self.c,
            "storage_constant": self.s0,
            "worst_prefix_margin": self.worst_margin,
            "horizons": self.horizons,
            "sample_count": self.sample_count,
            "valid": self.valid,
        }, indent=2)


@dataclass
class CostControllabilityProbe:
    """Observed value-to-pointwise-cost ratios and their monotone envelope."""

    rows: list  # dicts: x0, T, value, stage_min, ratio, flag
    bound: dict  # T -> running max ratio

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows,
                           "bound": {str(k): v for k, v in self.bound.items()}}, indent=2)


# --- dwell measure -----------------------------------------------------------

def dwell_measure(traj: Trajectory, distance: Callable[[np.ndarray], float],
                  epsilon: float) -> TurnpikeReport:
    """Lebesgue measure of {t : distance > epsilon} under linear interpolation.

    `distance` maps a state row (4,) to a scalar. Crossing times between
    nodes come from inverting the linear interpolant of the node distances.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    times = traj.times
    if len(times) == 0:
        raise ValueError("empty trajectory")
    dist = np.array([distance(traj.states[i]) for i in range(traj.n_nodes)])
    total = 0.0
    excursions: list[tuple[float, float]] = []
    open_start: float | None = float(times[0]) if dist[0] > epsilon else None
    for i in range(len(times) - 1):
        t0, t1 = float(times[i]), float(times[i + 1])
        d0, d1 = float(dist[i]), float(dist[i + 1])
        above0, above1 = d0 > epsilon, d1 > epsilon
        if above0 and above1:
            total += t1 - t0
        elif above0 and not above1:
            t_cross = t0 + (t1 - t0) * (d0 - epsilon) / (d0 - d1)
            total += t_cross - t0
            excursions.append((open_start if open_start is not None else t0, t_cross))
            open_start = None
        elif not above0 and above1:
            t_cross = t0 + (t1 - t0) * (epsilon - d0) / (d1 - d0)
            total += t1 - t_cross
            open_start = t_cross
    if open_start is not None:
        excursions.append((open_start, float(times[-1])))
    horizon = float(times[-1] - times[0]) if len(times) > 1 else 0.0
    return TurnpikeReport(epsilon=epsilon, dwell_measure=total,
                          excursions=excursions, horizon=horizon)


# --- horizon sweep -----------------------------------------------------------

def turnpike_scan(base_spec: OcpSpec, horizons: Sequence[float],
                  distance: Callable[[np.ndarray], float], epsilon: float,
                  opts: SqpOptions | None = None,
                  ratio_limit: float = 1.5) -> ScanResult:
    """Solve horizon-scaled copies of one problem and compare dwell measures.

    Each copy keeps the node density of `base_spec` (intervals scale
    proportionally with the horizon). The verdict is "bounded" when the
    max/min dwell ratio across the sweep stays within `ratio_limit`. Any
    failed solve aborts the sweep and returns the partial result.
    """
    density = base_spec.intervals / base_spec.horizon
    reports: list[TurnpikeReport] = []
    objectives: list[float] = []
    statuses: list[str] = []
    solutions: list[OcpSolution] = []
    done: list[float] = []
    for horizon in horizons:
        spec_t = replace(base_spec, horizon=float(horizon),
                         intervals=max(1, round(density * horizon)))
        sol = solve_ocp(spec_t, opts)
        statuses.append(sol.nlp_status)
        if sol.nlp_status != "converged":
            log.warning("scan aborted: horizon %g ended with status %s",
                        horizon, sol.nlp_status)
            return ScanResult(horizons=done + [float(horizon)], reports=reports,
                              objectives=objectives, statuses=statuses,
                              solutions=solutions, bounded=None,
                              verdict=f"aborted at T={horizon:g} ({sol.nlp_status})")
        report = dwell_measure(sol.trajectory, distance, epsilon)
        reports.append(report)
        objectives.append(sol.objective)
        solutions.append(sol)
        done.append(float(horizon))
    dwells = np.array([r.dwell_measure for r in reports])
    floor = 1e-9 * max(1.0, float(np.max(dwells)))
    ratio = float(np.max(dwells) / max(np.min(dwells), floor))
    bounded = bool(ratio <= ratio_limit)
    for report in reports:
        report.bound_estimate = float(np.max(dwells))
    verdict = "bounded" if bounded else f"dwell ratio {ratio:.3g} exceeds {ratio_limit:g}"
    return ScanResult(horizons=done, reports=reports, objectives=objectives,
                      statuses=statuses, solutions=solutions, bounded=bounded,
                      verdict=verdict)


# --- dissipativity -----------------------------------------------------------

def _prefix_margins(traj: Trajectory, stage_costs: np.ndarray,
                    distance: Callable[[np.ndarray, np.ndarray], float],
                    c: float, s0: float) -> np.ndarray:
    """Running left-rectangle sums of (cost - c dist^2) dt, offset by s0."""
    n_int = len(stage_costs)
    steps = np.diff(traj.times)
    dist2 = np.array([distance(traj.states[i], traj.controls[i])**2 for i in range(n_int)])
    increments = (stage_costs - c * dist2) * steps
    return np.cumsum(increments) + s0


def dissipativity_margin(solutions: Sequence[tuple[Trajectory, np.ndarray]],
                         distance: Callable[[np.ndarray, np.ndarray], float],
                         c: float, s0: float,
                         tol: float = 1e-6) -> DissipativityCertificate:
    """Check the constant-storage dissipation inequality over all prefixes.

    `solutions` holds (trajectory, stage-cost-per-interval) pairs from
    optimal solves; `distance` maps (state row, control row) to a scalar.
    Left-rectangle sums match the transcription quadrature, so the cost
    integrals agree with reported objectives exactly.
    """
    worst = np.inf
    horizons = []
    for traj, costs in solutions:
        margins = _prefix_margins(traj, np.asarray(costs, dtype=float), distance, c, s0)
        worst = min(worst, float(np.min(margins)))
        horizons.append(float(traj.times[-1] - traj.times[0]))
    return DissipativityCertificate(c=c, s0=s0, worst_margin=worst,
                                    horizons=horizons, sample_count=len(horizons),
                                    tol=tol)


def fit_max_dissipation_rate(solutions: Sequence[tuple[Trajectory, np.ndarray]],
                             distance: Callable[[np.ndarray, np.ndarray], float],
                             s0: float, margin_floor: float = -1e-6,
                             rel_tol: float = 1e-6) -> float:
    """Largest quadratic-rate coefficient keeping the worst margin acceptable.

    Bisection, bracket-converged to `rel_tol` relative width. Returns inf
    when the distance vanishes along every sample (any coefficient works).
    """
    def acceptable(c: float) -> bool:
        return dissipativity_margin(solutions, distance, c, s0).worst_margin >= margin_floor

    if not acceptable(0.0):
        return 0.0
    lo, hi = 0.0, 1.0
    while acceptable(hi):
        lo, hi = hi, 2.0 * hi
        if hi > 1e30:
            return np.inf
    while hi - lo > rel_tol * max(hi, 1e-30):
        mid = 0.5 * (lo + hi)
        if acceptable(mid):
            lo = mid
        else:
            hi = mid
    return lo


def theorem_dwell_bound(cert: DissipativityCertificate, max_total_cost: float,
                        epsilon: float) -> float:
    """Dwell bound (storage + cost bound) / alpha(epsilon) from the certificate."""
    return (cert.s0 + max_total_cost) / (cert.c * epsilon**2)


# --- cost controllability -----------------------------------------------------

def cost_controllability_probe(base_spec: OcpSpec, x0_list: Sequence,
                               horizons: Sequence[float],
                               opts: SqpOptions | None = None,
                               zero_tol: float = 1e-12) -> CostControllabilityProbe:
    """Tabulate value-function-to-pointwise-minimal-cost ratios.

    For each initial state the pointwise minimum of the stage cost over
    controls comes from a small NLP solve; the value function is the
    transcription objective at each horizon (with `base_spec`'s node
    density and no terminal constraint). Initial states on the cost
    zero-set are flagged instead of producing a ratio.
    """
    model = base_spec.model
    cost = base_spec.cost
    density = base_spec.intervals / base_spec.horizon
    rows: list[dict] = []
    bound: dict[float, float] = {}
    running = 0.0
    for horizon in sorted(float(t) for t in horizons):
        for x0 in x0_list:
            x0_arr = x0.as_array() if hasattr(x0, "as_array") else np.asarray(x0, dtype=float)
            stage_min = _pointwise_min_cost(model, cost, x0_arr)
            spec_t = replace(base_spec, horizon=horizon,
                             intervals=max(1, round(density * horizon)),
                             x0=base_spec.x0.from_array(x0_arr), terminal=None)
            sol = solve_ocp(spec_t, opts)
            row = {"x0": x0_arr.tolist(), "T": horizon, "value": sol.objective,
                   "stage_min": stage_min, "status": sol.nlp_status,
                   "ratio": None, "flag": ""}
            if stage_min <= zero_tol:
                if sol.objective > 1e-6:
                    row["flag"] = "ratio undefined -- on cost zero-set"
                else:
                    row["flag"] = "on cost zero-set"
            else:
                row["ratio"] = sol.objective / stage_min
                running = max(running, row["ratio"])
            rows.append(row)
        bound[horizon] = running
    return CostControllabilityProbe(rows=rows, bound=bound)


def _pointwise_min_cost(model, cost, x0_arr: np.ndarray) -> float:
    m = model.control_dim

    def objective(u: np.ndarray) -> float:
        return cost.value(model, x0_arr, u)

    def gradient(u: np.ndarray) -> np.ndarray:
        return cost.grad(model, x0_arr, u)[1]

    problem = NlpProblem(n=m, objective=objective, gradient=gradient)
    u_ref = getattr(cost, "u_ref", None)
    u0 = np.zeros(m) if u_ref is None else np.asarray(u_ref, dtype=float)
    sol = solve_sqp(problem, u0, SqpOptions(tol=1e-10, max_iter=200))
    return sol.objective


# --- average cost --------------------------------------------------------------

def average_cost(traj: Trajectory, stage_costs: np.ndarray) -> float:
    """Time-averaged running cost by the transcription quadrature."""
    horizon = float(traj.times[-1] - traj.times[0])
    if horizon <= 0:
        raise ValueError("degenerate horizon")
    steps = np.diff(traj.times)
    return float(np.sum(np.asarray(stage_costs, dtype=float) * steps) / horizon)
