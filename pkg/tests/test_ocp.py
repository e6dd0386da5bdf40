import math
from dataclasses import replace

import numpy as np
import pytest

from trimoc.app import (
    KEPLER_K,
    MODEL_REGISTRY,
    circular_orbit_rate,
    kepler_state,
    preset_fig2,
)
from trimoc.model import State, simulate
from trimoc.nlp import SqpOptions, solve_sqp
from trimoc.ocp import (
    CustomCost,
    GeneralTerminal,
    OcpSpec,
    QuadraticCost,
    TrimPenaltyCost,
    recover_costates,
    solve_ocp,
    solve_sop,
    solve_tocp,
    spec_from_dict,
    spec_to_dict,
    transcribe,
)
from trimoc.trim import solve_trim, trim_residual, trim_residual_grads


def small_quadratic_spec(kepler, horizon=2.0, intervals=10):
    x_ref = kepler_state(5.0).as_array()
    return OcpSpec(model=kepler, horizon=horizon, intervals=intervals,
                   cost=QuadraticCost(x_ref=x_ref, q=np.array([1.0, 0.0, 0.0, 1.0]),
                                      u_ref=np.zeros(2), r=5e-3 * np.ones(2)),
                   x0=kepler_state(5.0))


# --- stage costs -----------------------------------------------------------------

def test_quadratic_cost_values(kepler):
    cost = QuadraticCost(x_ref=np.array([4.5, 0, 0, 2.0]), q=np.array([1.0, 1.0, 0, 2.0]),
                         u_ref=np.array([0.0, 1.0]), r=np.array([0.1, 0.2]))
    x = np.array([5.0, 0.3, 7.0, 2.5])
    u = np.array([0.5, 0.5])
    # Control quadratic carries no 1/2.
    expected = 0.5 * (0.25 + 0.09 + 2 * 0.25) + (0.1 * 0.25 + 0.2 * 0.25)
    assert cost.value(kepler, x, u) == pytest.approx(expected)
    gx, gu = cost.grad(kepler, x, u)
    np.testing.assert_allclose(gx, [0.5, 0.3, 0.0, 1.0])
    np.testing.assert_allclose(gu, [0.1, -0.2])


def test_quadratic_cost_rejects_theta_weight():
    with pytest.raises(ValueError, match="theta"):
        QuadraticCost(x_ref=np.zeros(4), q=np.array([1.0, 0, 1.0, 1.0]),
                      u_ref=np.zeros(2), r=np.ones(2))


def test_trim_penalty_cost_matches_manual(kepler):
    cost = TrimPenaltyCost(w_t=5e3, s_ref=5.3, u_ref=np.array([0.0, 1.0]),
                           r=1e-3 * np.ones(2))
    x = np.array([5.0, 0.1, 0.0, 2.6])
    u = np.array([0.4, 0.2])
    t_val = trim_residual(kepler, 5.0, 2.6, u)
    manual = 5e3 * t_val**2 + 0.5 * (5.0 - 5.3)**2 + 0.5 * (1e-3 * 0.16 + 1e-3 * 0.64)
    assert cost.value(kepler, x, u) == pytest.approx(manual, rel=1e-12)


def test_stage_cost_gradients_match_fd(kepler):
    costs = [
        QuadraticCost(x_ref=kepler_state(4.5).as_array(), q=np.array([1.0, 0.5, 0, 1.0]),
                      u_ref=np.zeros(2), r=5e-3 * np.ones(2)),
        TrimPenaltyCost(w_t=5e3, s_ref=5.3, u_ref=np.array([0.0, 1.0]),
                        r=1e-3 * np.ones(2)),
    ]
    rng = np.random.default_rng(6)
    for cost in costs:
        for _ in range(10):
            # Near-trim samples keep the penalty term small enough that the
            # finite-difference oracle is not swamped by cancellation.
            s = rng.uniform(4, 6)
            x = np.array([s, rng.normal(0, 0.3), rng.normal(),
                          circular_orbit_rate(s) * (1 + 0.02 * rng.normal())])
            u = rng.normal(0, 0.3, 2)
            gx, gu = cost.grad(kepler, x, u)
            scale = 1.0 + abs(cost.value(kepler, x, u))
            for j in range(4):
                e = np.zeros(4)
                e[j] = 1e-6 * (1 + abs(x[j]))
                fd = (cost.value(kepler, x + e, u) - cost.value(kepler, x - e, u)) / (2 * e[j])
                assert abs(gx[j] - fd) <= 1e-4 * (1 + abs(gx[j]) + scale * 1e-6)
            for j in range(2):
                e = np.zeros(2)
                e[j] = 1e-4
                fd = (cost.value(kepler, x, u + e) - cost.value(kepler, x, u - e)) / 2e-4
                assert abs(gu[j] - fd) <= 1e-4 * (1 + abs(gu[j]) + scale * 1e-6)


# --- transcription ----------------------------------------------------------------

def test_transcribe_dimension_counts(kepler):
    spec = small_quadratic_spec(kepler, horizon=0.5, intervals=1)
    problem = transcribe(spec)
    assert problem.n == 8 + 2
    w0 = np.concatenate([np.tile(spec.x0.as_array(), 2), np.zeros(2)])
    assert problem.eq_con(w0).size == 8


def test_transcribe_fig1_dimensions(fig1_spec):
    problem = transcribe(fig1_spec)
    assert problem.n == 4 * 301 + 2 * 300 == 1804
    assert fig1_spec.step == pytest.approx(0.1)


def test_transcribe_zero_cost_feasible_start(kepler):
    spec = replace(small_quadratic_spec(kepler, horizon=2.0, intervals=20),
                   cost=QuadraticCost(x_ref=np.zeros(4), q=np.zeros(4),
                                      u_ref=np.zeros(2), r=np.zeros(2)))
    times = spec.times()
    warm = simulate(kepler, spec.x0, np.zeros((20, 2)), times)
    sol = solve_ocp(spec, opts=SqpOptions(hessian="bfgs"), warm_start=warm)
    assert sol.nlp_status == "converged"
    assert sol.objective == pytest.approx(0.0, abs=1e-12)
    assert sol.nlp.iterations <= 1


def test_transcribed_derivatives_pass_fd_validation(kepler):
    spec = replace(preset_fig2(), horizon=1.0, intervals=3)
    problem = replace(transcribe(spec), validate=True)
    rng = np.random.default_rng(3)
    w0 = (np.concatenate([np.tile(spec.x0.as_array(), 4), 0.1 * rng.normal(size=6)])
          + 0.01 * rng.normal(size=problem.n))
    sol = solve_sqp(problem, w0, SqpOptions(max_iter=120))
    assert sol.status == "converged"


def test_spec_validation():
    from trimoc.app import kepler_model

    model = kepler_model()
    cost = QuadraticCost(x_ref=np.zeros(4), q=np.zeros(4), u_ref=np.zeros(2),
                         r=np.zeros(2))
    with pytest.raises(ValueError):
        OcpSpec(model=model, horizon=-1.0, intervals=10, cost=cost,
                x0=kepler_state(5.0))
    with pytest.raises(ValueError):
        OcpSpec(model=model, horizon=1.0, intervals=0, cost=cost,
                x0=kepler_state(5.0))
    with pytest.raises(ValueError):
        OcpSpec(model=model, horizon=1.0, intervals=10, cost=cost,
                x0=kepler_state(5.0), terminal=[(7, 1.0)])


# --- full solves --------------------------------------------------------------------

def test_solve_ocp_trim_centered_cost_is_stationary(kepler):
    tp = solve_trim(kepler, {"s": 5.0, "u": np.zeros(2)}, guess=1.0)
    cost = TrimPenaltyCost(w_t=5e3, s_ref=5.0, u_ref=tp.u, r=1e-3 * np.ones(2))
    spec = OcpSpec(model=kepler, horizon=5.0, intervals=25, cost=cost,
                   x0=State(5.0, 0.0, 0.0, tp.v_th))
    sol = solve_ocp(spec)
    assert sol.nlp_status == "converged"
    assert sol.objective <= 1e-10
    assert np.max(np.abs(sol.trajectory.controls - tp.u)) < 1e-5


def test_solution_defects_and_initial_state(fig2_solution, fig2_spec):
    sol = fig2_solution
    assert sol.nlp_status == "converged"
    assert sol.defect_max <= 1e-8
    np.testing.assert_allclose(sol.trajectory.states[0],
                               fig2_spec.x0.as_array(), atol=1e-10)


def test_theta_shift_invariance(kepler, fig2_spec):
    small = replace(fig2_spec, horizon=10.0, intervals=20)
    base = solve_ocp(small)
    shifted = solve_ocp(replace(small, x0=kepler_state(5.3, th=0.7)))
    delta_th = shifted.trajectory.states[:, 2] - base.trajectory.states[:, 2]
    assert np.max(np.abs(delta_th - 0.7)) < 1e-6
    for field in ("states", "controls", "costates"):
        a = getattr(base.trajectory, field)
        b = getattr(shifted.trajectory, field)
        if field == "states":
            a, b = a[:, [0, 1, 3]], b[:, [0, 1, 3]]
        assert np.max(np.abs(a - b)) < 1e-6


def test_general_terminal_inequality(kepler):
    # Pull toward 5.3 but cap the final radius at 5.1.
    cost = TrimPenaltyCost(w_t=5e3, s_ref=5.3, u_ref=np.zeros(2), r=1e-3 * np.ones(2))
    terminal = GeneralTerminal(psi=lambda x: np.array([x[0] - 5.1]),
                               psi_jac=lambda x: np.array([[1.0, 0, 0, 0]]))
    spec = OcpSpec(model=kepler, horizon=8.0, intervals=40, cost=cost,
                   x0=kepler_state(5.0), terminal=terminal)
    sol = solve_ocp(spec)
    assert sol.nlp_status == "converged"
    assert sol.trajectory.states[-1, 0] <= 5.1 + 1e-8
    assert np.all(sol.nlp.mult_ineq >= -1e-8)


def test_control_bounds_respected(kepler):
    spec = replace(small_quadratic_spec(kepler, horizon=2.0, intervals=10),
                   x0=kepler_state(5.5),
                   u_lower=np.array([-0.5, -0.5]), u_upper=np.array([0.5, 0.5]))
    sol = solve_ocp(spec)
    assert sol.nlp_status == "converged"
    assert np.all(sol.trajectory.controls <= 0.5 + 1e-10)
    assert np.all(sol.trajectory.controls >= -0.5 - 1e-10)


# --- costate recovery ------------------------------------------------------------------

def test_terminal_costate_vanishes_without_terminal_constraint(fig2_solution):
    assert np.max(np.abs(fig2_solution.trajectory.costates[-1])) <= 1e-6


def test_cyclic_costate_identically_zero(fig1_solution):
    sol, _ = fig1_solution
    assert np.max(np.abs(sol.trajectory.costates[:, 2])) <= 1e-10


def test_terminal_costate_pattern_with_terminal_constraint(fig1_solution):
    # Constrained components (s, v_s, v_th) carry multipliers; theta is free.
    sol, _ = fig1_solution
    lam_end = sol.trajectory.costates[-1]
    assert abs(lam_end[2]) <= 1e-10


def test_adjoint_recursion_mismatch_is_first_order(kepler, fig2_spec):
    def mismatch(intervals):
        spec = replace(fig2_spec, horizon=10.0, intervals=intervals)
        return solve_ocp(spec).adjoint_consistency

    coarse, fine = mismatch(20), mismatch(40)
    assert fine < coarse
    assert 1.2 <= coarse / fine <= 8.0


# --- reduced problem ---------------------------------------------------------------------

def test_tocp_orthogonal_forcing_constant_rate(spring_model):
    cost = CustomCost(
        fn=lambda s, v_s, v_th, u: (s - 1.0)**2 + float(u[0]**2),
        grad_fn=lambda s, v_s, v_th, u: (2 * (s - 1.0), 0.0, 0.0, 2 * u),
    )
    tocp = solve_tocp(spring_model, cost, th0=0.2, v_th0=1.5, horizon=4.0,
                      intervals=20, s_guess=0.5,
                      opts=SqpOptions(hessian="bfgs", max_iter=300))
    assert tocp.nlp_status == "converged"
    assert np.max(np.abs(tocp.v_bar - 1.5)) <= 1e-8
    assert np.max(np.abs(np.diff(tocp.u_bar, axis=0))) <= 1e-6
    expected_th = 0.2 + 1.5 * tocp.times
    np.testing.assert_allclose(tocp.th_bar, expected_th, atol=1e-8)
    # Shape settles where the anchored cost and trim constraint balance:
    # minimize (s-1)^2 + u^2 with u = s (trim residual u - s = 0).
    assert tocp.s_bar == pytest.approx(0.5, abs=1e-7)


def test_tocp_single_interval_against_grid_search(kepler):
    v0 = circular_orbit_rate(5.0)
    x_ref = kepler_state(4.8).as_array()
    cost = QuadraticCost(x_ref=x_ref, q=np.array([1.0, 0, 0, 1.0]),
                         u_ref=np.zeros(2), r=1e-2 * np.ones(2))
    horizon = 0.4
    tocp = solve_tocp(kepler, cost, th0=0.0, v_th0=v0, horizon=horizon,
                      intervals=1, s_guess=5.0)
    assert tocp.nlp_status == "converged"

    # Brute force: the initial rate is fixed, so the trim constraint pins
    # u_s given s_bar; only (s_bar, u_th) remain free.
    def objective(s_bar, u_th):
        u_s = -s_bar * v0**2 + KEPLER_K / s_bar**2
        u = np.array([u_s, u_th])
        return horizon * cost.value(kepler, np.array([s_bar, 0, 0, v0]), u)

    grid_s = np.linspace(4.6, 5.2, 601)
    grid_u = np.linspace(-0.5, 0.5, 401)
    values = np.array([[objective(s, ut) for ut in grid_u] for s in grid_s])
    i, j = np.unravel_index(np.argmin(values), values.shape)
    assert tocp.s_bar == pytest.approx(grid_s[i], abs=2e-3)
    assert tocp.u_bar[0, 1] == pytest.approx(grid_u[j], abs=5e-3)
    assert values[i, j] >= tocp.objective - 1e-9


def test_tocp_trim_constraint_enforced(fig2_tocp, kepler):
    assert fig2_tocp.nlp_status == "converged"
    worst = max(abs(trim_residual(kepler, fig2_tocp.s_bar, fig2_tocp.v_bar[i],
                                  fig2_tocp.u_bar[i]))
                for i in range(len(fig2_tocp.u_bar)))
    assert worst <= 1e-8


# --- steady-state problem ---------------------------------------------------------------

def test_sop_spring_hand_kkt(spring_model):
    cost = CustomCost(
        fn=lambda s, v_s, v_th, u: s**2 + float(u[0]**2),
        grad_fn=lambda s, v_s, v_th, u: (2 * s, 0.0, 0.0, 2 * u),
    )
    sop = solve_sop(spring_model, cost, guess=[0.8, 0.0, 0.8])
    assert sop.nlp_status == "converged"
    assert sop.s_bar == pytest.approx(0.0, abs=1e-8)
    assert sop.u_bar[0] == pytest.approx(0.0, abs=1e-8)
    assert sop.lam == pytest.approx(0.0, abs=1e-8)
    assert sop.residuals.max_abs <= 1e-8


def test_sop_pure_residual_cost_returns_trim(kepler):
    def fn(s, v_s, v_th, u):
        return trim_residual(kepler, s, v_th, u)**2

    def grad_fn(s, v_s, v_th, u):
        t_val = trim_residual(kepler, s, v_th, u)
        d_s, d_v, d_u = trim_residual_grads(kepler, s, v_th, u)
        return 2 * t_val * d_s, 0.0, 2 * t_val * d_v, 2 * t_val * d_u

    sop = solve_sop(kepler, CustomCost(fn=fn, grad_fn=grad_fn),
                    guess=[5.0, 2.0, 0.0, 0.0])
    assert abs(sop.trim_value) <= 1e-10
    assert sop.nlp.objective <= 1e-16


def test_sop_rejects_bad_guess_shape(kepler, fig1_spec):
    with pytest.raises(ValueError):
        solve_sop(kepler, fig1_spec.cost, guess=[5.0, 2.0])


# --- JSON codec ---------------------------------------------------------------------------

def test_spec_json_round_trip(fig1_spec):
    doc = spec_to_dict(fig1_spec)
    back = spec_from_dict(doc, MODEL_REGISTRY)
    assert back.horizon == fig1_spec.horizon
    assert back.intervals == fig1_spec.intervals
    assert back.terminal == fig1_spec.terminal
    np.testing.assert_array_equal(back.x0.as_array(), fig1_spec.x0.as_array())
    np.testing.assert_array_equal(back.cost.q, fig1_spec.cost.q)
    np.testing.assert_array_equal(back.cost.r, fig1_spec.cost.r)
    assert spec_to_dict(back) == doc


def test_spec_json_trim_penalty(fig2_spec):
    doc = spec_to_dict(fig2_spec)
    back = spec_from_dict(doc, MODEL_REGISTRY)
    assert back.cost.w_t == fig2_spec.cost.w_t
    assert back.cost.s_ref == fig2_spec.cost.s_ref
    assert back.terminal is None


def test_spec_json_rejects_unknown_model(fig1_spec):
    doc = spec_to_dict(fig1_spec)
    doc["model"] = {"name": "pendulum"}
    with pytest.raises(ValueError, match="unknown model"):
        spec_from_dict(doc, MODEL_REGISTRY)


def test_spec_json_rejects_unserializable(kepler):
    cost = CustomCost(fn=lambda s, v_s, v_th, u: 0.0,
                      grad_fn=lambda s, v_s, v_th, u: (0, 0, 0, np.zeros(2)))
    spec = OcpSpec(model=kepler, horizon=1.0, intervals=2, cost=cost,
                   x0=kepler_state(5.0),
                   model_doc={"name": "kepler", "params": {}})
    with pytest.raises(ValueError, match="JSON"):
        spec_to_dict(spec)
