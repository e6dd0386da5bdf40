"""Canned experiments: the two-body (Kepler) instance and result emission.

The reference system is a body of mass m2 orbiting a primary in the plane,
described by radius s and angle theta with gravitational product
k = gamma m1 m2. Two preset problems are provided: a quadratic-cost orbit
transfer whose solution hugs an intermediate circular orbit, and a
trim-tracking cost that holds the initial circular orbit over a long
horizon. `run` solves a configured problem and writes CSV/JSON artifacts.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nco
from .model import MechModel, State, trajectory_to_csv
from .nlp import SqpOptions
from .ocp import (
    OcpSpec,
    QuadraticCost,
    TrimPenaltyCost,
    solve_ocp,
    solve_sop,
    solve_tocp,
    spec_from_dict,
)
from .trim import combined_residual, trim_residual
from .turnpike import (
    dissipativity_margin,
    dwell_measure,
    fit_max_dissipation_rate,
    turnpike_scan,
)

__all__ = [
    "KeplerParams",
    "ExperimentConfig",
    "kepler_model",
    "circular_orbit_rate",
    "kepler_state",
    "preset_fig1",
    "preset_fig2",
    "MODEL_REGISTRY",
    "PRESETS",
    "run",
]

KEPLER_K = 1.016895192894334e3
KEPLER_S_MIN = 0.1


@dataclass(frozen=True)
class KeplerParams:
    """Gravitational product k = gamma m1 m2 and secondary mass m2."""

    k: float = KEPLER_K
    m2: float = 1.0

    def __post_init__(self) -> None:
        if self.k <= 0 or self.m2 <= 0:
            raise ValueError("k and m2 must be positive")


def kepler_model(params: KeplerParams | None = None, k: float | None = None,
                 m2: float | None = None) -> MechModel:
    """Planar two-body model: constant shape mass, m2 s^2 cyclic inertia.

    Controls are (u_s, u_theta) forcing radius and angle directly; the
    radial forcing reaches all of R, so the trim manifold is {v_s = 0}.
    """
    if params is None:
        params = KeplerParams(k=KEPLER_K if k is None else k,
                              m2=1.0 if m2 is None else m2)
    k_val, m2_val = params.k, params.m2
    return MechModel(
        m11=lambda s: m2_val,
        m11_d=lambda s: 0.0,
        m11_dd=lambda s: 0.0,
        m22=lambda s: m2_val * s**2,
        m22_d=lambda s: 2.0 * m2_val * s,
        m22_dd=lambda s: 2.0 * m2_val,
        pot=lambda s: -k_val / s,
        pot_d=lambda s: k_val / s**2,
        pot_dd=lambda s: -2.0 * k_val / s**3,
        f_s=lambda u: float(u[0]),
        f_s_jac=lambda u: np.array([1.0, 0.0]),
        f_th=lambda u: float(u[1]),
        f_th_jac=lambda u: np.array([0.0, 1.0]),
        control_dim=2,
        s_min=KEPLER_S_MIN,
        forcing_surjective=True,
    )


def circular_orbit_rate(radius: float, params: KeplerParams | None = None) -> float:
    """Angular rate of the unforced circular orbit at the given radius."""
    params = params or KeplerParams()
    return math.sqrt(params.k / (params.m2 * radius**3))


def kepler_state(radius: float, params: KeplerParams | None = None,
                 th: float = 0.0) -> State:
    """On-trim state at a circular orbit: zero radial velocity."""
    return State(radius, 0.0, th, circular_orbit_rate(radius, params))


def preset_fig1(params: KeplerParams | None = None) -> OcpSpec:
    """Orbit transfer 5.0 -> 6.0 with a quadratic cost centered at radius 4.5.

    Horizon 30 with 300 intervals; the terminal constraint fixes
    (s, v_s, v_theta) and leaves the angle free. State weights anchor the
    radius and cyclic rate (the cyclic angle is never penalized); the
    realized control term is 1/2 (u)^T (1e-2 I) u, passed as r = 5e-3
    because QuadraticCost's control quadratic is unhalved.
    """
    params = params or KeplerParams()
    x_ref = kepler_state(4.5, params).as_array()
    return OcpSpec(
        model=kepler_model(params),
        horizon=30.0,
        intervals=300,
        cost=QuadraticCost(x_ref=x_ref, q=np.array([1.0, 0.0, 0.0, 1.0]),
                           u_ref=np.zeros(2), r=0.5e-2 * np.ones(2)),
        x0=kepler_state(5.0, params),
        terminal=[(0, 6.0), (1, 0.0), (3, circular_orbit_rate(6.0, params))],
        model_doc={"name": "kepler", "params": {"k": params.k, "m2": params.m2}},
    )


def preset_fig2(params: KeplerParams | None = None) -> OcpSpec:
    """Trim tracking from the 5.3 circular orbit, horizon 100, 200 intervals.

    The running cost combines a heavily weighted squared trim residual, a
    radius anchor at 5.3 and a small control penalty whose reference pulls
    the angular forcing toward one; no terminal constraint.
    """
    params = params or KeplerParams()
    return OcpSpec(
        model=kepler_model(params),
        horizon=100.0,
        intervals=200,
        cost=TrimPenaltyCost(w_t=5e3, s_ref=5.3, s_weight=1.0,
                             u_ref=np.array([0.0, 1.0]), r=1e-3 * np.ones(2)),
        x0=kepler_state(5.3, params),
        terminal=None,
        model_doc={"name": "kepler", "params": {"k": params.k, "m2": params.m2}},
    )


MODEL_REGISTRY = {"kepler": lambda **kwargs: kepler_model(KeplerParams(**kwargs))}
PRESETS = {"kepler-fig1": preset_fig1, "kepler-fig2": preset_fig2}


@dataclass
class ExperimentConfig:
    """What to solve and which analyses to attach.

    `preset` is one of the named presets or "custom" with `spec_doc`
    holding the inline problem document. Analysis toggles mirror the CLI
    subcommands.
    """

    preset: str = "kepler-fig1"
    spec_doc: dict | None = None
    out_dir: str = "out"
    tol: float = 1e-8
    max_iter: int = 200
    nco_check: bool = False
    tocp: bool = False
    sop: bool = False
    turnpike_horizons: list = field(default_factory=list)
    turnpike_epsilon: float = 0.1
    dissipativity: bool = False

    @staticmethod
    def from_dict(doc: dict) -> "ExperimentConfig":
        analyses = doc.get("analyses", {})
        scan = analyses.get("turnpike_scan") or {}
        return ExperimentConfig(
            preset=doc.get("preset", "kepler-fig1"),
            spec_doc=doc.get("spec"),
            out_dir=doc.get("out", "out"),
            tol=doc.get("tol", 1e-8),
            max_iter=doc.get("max_iter", 200),
            nco_check=analyses.get("nco_check", False),
            tocp=analyses.get("tocp", False),
            sop=analyses.get("sop", False),
            turnpike_horizons=list(scan.get("horizons", [])),
            turnpike_epsilon=scan.get("epsilon", 0.1),
            dissipativity=analyses.get("dissipativity", False),
        )


def _build_spec(config: ExperimentConfig) -> OcpSpec:
    if config.preset == "custom":
        if config.spec_doc is None:
            raise ValueError("custom preset requires an inline spec document")
        return spec_from_dict(config.spec_doc, MODEL_REGISTRY)
    if config.preset not in PRESETS:
        raise KeyError(f"unknown preset {config.preset!r}")
    return PRESETS[config.preset]()


def run(config: ExperimentConfig) -> int:
    """Solve the configured problem, write artifacts, return an exit status.

    Always writes trajectory.csv and summary.json under the output
    directory; analysis toggles add tocp_trajectory.csv, nco_report.json,
    turnpike.csv/.json, dissipativity.json and a sop section. Returns 0 on
    solver convergence, 1 otherwise (error.json holds the failure record).
    """
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        spec = _build_spec(config)
    except (KeyError, ValueError) as exc:
        (out / "error.json").write_text(json.dumps({"error": str(exc)}))
        raise

    opts = SqpOptions(tol=config.tol, max_iter=config.max_iter,
                      hessian="gauss-newton" if getattr(spec.cost, "gn_block", None)
                      else "bfgs")
    started = time.perf_counter()
    sol = solve_ocp(spec, opts)
    elapsed = time.perf_counter() - started
    trajectory_to_csv(sol.trajectory, out / "trajectory.csv")
    summary = {
        "preset": config.preset,
        "status": sol.nlp_status,
        "objective": sol.objective,
        "kkt": sol.kkt_residuals,
        "defect_max": sol.defect_max,
        "iterations": sol.nlp.iterations,
        "timings": {"solve_seconds": elapsed},
    }

    if config.sop:
        guess = np.concatenate([[spec.x0.s, spec.x0.v_th], np.zeros(spec.model.control_dim)])
        sop = solve_sop(spec.model, spec.cost, guess)
        summary["sop"] = {
            "s_bar": sop.s_bar, "v_theta_bar": sop.v_theta_bar,
            "u_bar": sop.u_bar.tolist(), "multiplier": sop.lam,
            "status": sop.nlp_status, "residual_max": sop.residuals.max_abs,
        }

    nco_doc: dict = {}
    tocp_sol = None
    if config.tocp:
        tocp_sol = solve_tocp(spec.model, spec.cost, spec.x0.th, spec.x0.v_th,
                              spec.horizon, spec.intervals, s_guess=spec.x0.s,
                              opts=opts)
        tocp_traj, report = nco.correspondence_full_from_reduced(
            spec.model, tocp_sol, spec.cost)
        trajectory_to_csv(tocp_traj, out / "tocp_trajectory.csv")
        summary["tocp"] = {"s_bar": tocp_sol.s_bar, "status": tocp_sol.nlp_status,
                           "objective": tocp_sol.objective}
        nco_doc["correspondence"] = json.loads(report.to_json())
    if config.nco_check:
        traj = sol.trajectory
        worst_adj = 0.0
        worst_stat = 0.0
        for i in range(len(traj.controls)):
            lam = traj.costates[i + 1]
            rate = nco.adjoint_rhs(spec.model, spec.cost, traj.states[i],
                                   traj.controls[i], lam)
            fd = (traj.costates[i + 1] - traj.costates[i]) / spec.step
            worst_adj = max(worst_adj, float(np.max(np.abs(fd - rate))
                                             / (1.0 + np.max(np.abs(rate)))))
            stat = nco.stationarity_residual(spec.model, spec.cost, traj.states[i],
                                             traj.controls[i], lam)
            worst_stat = max(worst_stat, float(np.max(np.abs(stat))))
        nco_doc["full_solution"] = {
            "adjoint_recursion_mismatch": worst_adj,
            "stationarity_max": worst_stat,
        }
    if nco_doc:
        (out / "nco_report.json").write_text(json.dumps(nco_doc, indent=2))

    if config.turnpike_horizons:
        anchor = getattr(spec.cost, "x_ref", None)
        if anchor is not None:
            ref = np.asarray(anchor, dtype=float)

            def distance(x: np.ndarray) -> float:
                return float(np.linalg.norm([x[0] - ref[0], x[1], x[3] - ref[3]]))
        else:
            def distance(x: np.ndarray) -> float:
                return abs(x[1])
        scan = turnpike_scan(spec, config.turnpike_horizons, distance,
                             config.turnpike_epsilon, opts)
        scan.to_csv(out / "turnpike.csv")
        (out / "turnpike.json").write_text(scan.to_json())
        summary["turnpike"] = {"verdict": scan.verdict, "bounded": scan.bounded}

    if config.dissipativity:
        def dist_combined(x: np.ndarray, u: np.ndarray) -> float:
            return combined_residual(spec.model, State.from_array(x), u, w=1.0)

        samples = [(sol.trajectory, sol.stage_costs)]
        cert_c = fit_max_dissipation_rate(samples, dist_combined, s0=0.0)
        cert = dissipativity_margin(samples, dist_combined,
                                    c=min(cert_c, 1e12) if np.isfinite(cert_c) else 1e12,
                                    s0=0.0)
        (out / "dissipativity.json").write_text(json.dumps({
            "fit_max_c": None if np.isinf(cert_c) else cert_c,
            "worst_margin": cert.worst_margin,
            "valid": cert.valid,
        }, indent=2))
        summary["dissipativity"] = {"fit_max_c": None if np.isinf(cert_c) else cert_c}

    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    if sol.nlp_status != "converged":
        (out / "error.json").write_text(json.dumps(
            {"error": f"solver status {sol.nlp_status}", "summary": summary}))
        return 1
    return 0
