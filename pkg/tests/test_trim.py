import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trimoc.app import KEPLER_K, circular_orbit_rate, kepler_state
from trimoc.model import State, el_rhs
from trimoc.trim import (
    TrimPoint,
    TrimSolveError,
    combined_residual,
    forced_amended_potential,
    forced_potential,
    manifold_distance,
    solve_trim,
    trim_residual,
    trim_residual_grads,
    trim_trajectory,
)

U0 = np.zeros(2)


# --- residual -------------------------------------------------------------------

@pytest.mark.parametrize("s", [4.5, 5.0, 5.3, 6.0])
def test_residual_zero_on_circular_orbits(kepler, s):
    assert abs(trim_residual(kepler, s, circular_orbit_rate(s), U0)) < 1e-12


def test_residual_at_rest(kepler):
    assert trim_residual(kepler, 5.0, 0.0, U0) == pytest.approx(-KEPLER_K / 25.0,
                                                                rel=1e-14)


def test_residual_vanishes_with_compensating_control(kepler):
    # u_s = -m2 s v^2 + k/s^2 cancels the shape acceleration.
    rng = np.random.default_rng(1)
    for _ in range(20):
        v = rng.normal(0, 3)
        u = np.array([-4.5 * v**2 + KEPLER_K / 4.5**2, rng.normal()])
        assert abs(trim_residual(kepler, 4.5, v, u)) < 1e-10


# --- gradients -------------------------------------------------------------------

def test_grad_vth_closed_form(kepler):
    rng = np.random.default_rng(2)
    for _ in range(10):
        s, v = rng.uniform(1, 8), rng.normal(0, 2)
        _, d_vth, _ = trim_residual_grads(kepler, s, v, U0)
        assert d_vth == pytest.approx(2.0 * s * v, rel=1e-12, abs=1e-12)


def test_grads_zero_for_flat_model(unit_model):
    d_s, d_vth, d_u = trim_residual_grads(unit_model, 0.7, 1.3, np.zeros(1))
    assert d_s == 0.0 and d_vth == 0.0
    # f_s = u leaves the direct control slope.
    np.testing.assert_array_equal(d_u, [1.0])


def test_grads_match_finite_differences(kepler):
    rng = np.random.default_rng(3)
    for _ in range(25):
        s, v = rng.uniform(1, 8), rng.normal(0, 2)
        u = rng.normal(0, 2, 2)
        d_s, d_vth, d_u = trim_residual_grads(kepler, s, v, u)
        h = 1e-6 * (1 + abs(s))
        fd_s = (trim_residual(kepler, s + h, v, u) - trim_residual(kepler, s - h, v, u)) / (2 * h)
        h = 1e-6 * (1 + abs(v))
        fd_v = (trim_residual(kepler, s, v + h, u) - trim_residual(kepler, s, v - h, u)) / (2 * h)
        assert d_s == pytest.approx(fd_s, rel=1e-6, abs=1e-6)
        assert d_vth == pytest.approx(fd_v, rel=1e-6, abs=1e-6)
        for j in range(2):
            e = np.zeros(2)
            e[j] = 1e-6
            fd = (trim_residual(kepler, s, v, u + e) - trim_residual(kepler, s, v, u - e)) / 2e-6
            assert d_u[j] == pytest.approx(fd, rel=1e-6, abs=1e-9)


# --- potentials -------------------------------------------------------------------

def test_forced_potential_reduces_to_plain(kepler):
    value, grad = forced_amended_potential(kepler, 3.0, 0.0, U0)
    assert value == pytest.approx(kepler.pot(3.0))
    assert grad == pytest.approx(kepler.pot_d(3.0))
    assert forced_potential(kepler, 3.0, U0) == pytest.approx(kepler.pot(3.0))


def test_amended_gradient_cancels_scaled_residual(kepler):
    # Substituting mu = M22 v collapses the gradient onto -M11 T.
    rng = np.random.default_rng(4)
    for _ in range(50):
        s, v = rng.uniform(1, 9), rng.normal(0, 3)
        u = rng.normal(0, 2, 2)
        mu = kepler.m22(s) * v
        _, grad = forced_amended_potential(kepler, s, mu, u)
        t_val = kepler.m11(s) * trim_residual(kepler, s, v, u)
        assert abs(grad + t_val) / (1 + max(abs(grad), abs(t_val))) < 1e-10


def test_circular_orbit_is_critical_point(kepler):
    s = 5.0
    mu = kepler.m22(s) * circular_orbit_rate(s)
    _, grad = forced_amended_potential(kepler, s, mu, U0)
    assert abs(grad) < 1e-10


@settings(max_examples=60, deadline=None)
@given(s=st.floats(0.8, 9.0), v=st.floats(-4, 4), u_s=st.floats(-30, 30))
def test_amended_gradient_identity_property(s, v, u_s):
    from trimoc.app import kepler_model

    model = kepler_model()
    u = np.array([u_s, 0.0])
    mu = model.m22(s) * v
    _, grad = forced_amended_potential(model, s, mu, u)
    t_val = model.m11(s) * trim_residual(model, s, v, u)
    assert abs(grad + t_val) <= 1e-10 * (1 + max(abs(grad), abs(t_val)))


# --- solving ---------------------------------------------------------------------

def test_solve_for_cyclic_rate(kepler):
    tp = solve_trim(kepler, {"s": 4.5, "u": U0}, guess=1.0)
    assert tp.v_th == pytest.approx(math.sqrt(KEPLER_K / 4.5**3), abs=1e-10)
    assert abs(tp.residual) <= 1e-10


def test_solve_for_control_on_unforced_orbit(kepler):
    tp = solve_trim(kepler, {"s": 5.3, "v_th": circular_orbit_rate(5.3),
                             "u": [None, 0.0]}, guess=1.0)
    assert tp.u[0] == pytest.approx(0.0, abs=1e-9)


def test_solve_linear_control_single_step(spring_model):
    # Residual is linear in the control, so Newton lands in one step.
    tp = solve_trim(spring_model, {"s": 2.0, "v_th": 0.4, "u": [None]}, guess=17.0)
    assert tp.u[0] == pytest.approx(2.0, abs=1e-12)
    assert tp.iterations <= 1


def test_solve_idempotent(kepler):
    tp = solve_trim(kepler, {"s": 4.5, "u": U0}, guess=1.0)
    again = solve_trim(kepler, {"s": 4.5, "u": U0}, guess=tp.v_th)
    assert again.iterations <= 1


def test_solve_for_shape(kepler):
    tp = solve_trim(kepler, {"v_th": circular_orbit_rate(6.0), "u": U0}, guess=5.0)
    assert tp.s == pytest.approx(6.0, abs=1e-8)


def test_singular_newton_reported(kepler):
    # dT/dv vanishes at v = 0.
    with pytest.raises(TrimSolveError, match="singular"):
        solve_trim(kepler, {"s": 5.0, "u": U0}, guess=0.0)


def test_no_convergence_reports_residual(unit_model):
    # f_s = u with u fixed to 1: residual is constant 1, no root in v.
    with pytest.raises(TrimSolveError):
        solve_trim(unit_model, {"s": 1.0, "u": [1.0]}, guess=0.5)


def test_solve_requires_exactly_one_unknown(kepler):
    with pytest.raises(ValueError):
        solve_trim(kepler, {"s": 5.0, "v_th": 1.0, "u": [None, None]})
    with pytest.raises(ValueError):
        solve_trim(kepler, {"u": U0})


def test_trim_point_json_round_trip(kepler):
    tp = solve_trim(kepler, {"s": 4.5, "u": U0}, guess=1.0)
    back = TrimPoint.from_json(tp.to_json())
    assert back.s == tp.s and back.v_th == tp.v_th
    np.testing.assert_array_equal(back.u, tp.u)


def test_trim_point_rejects_large_residual():
    with pytest.raises(ValueError):
        TrimPoint(s=1.0, v_th=1.0, u=np.zeros(1), residual=1e-3)


# --- trajectories -----------------------------------------------------------------

def test_trim_trajectory_single_node(kepler):
    tp = solve_trim(kepler, {"s": 5.0, "u": U0}, guess=1.0)
    traj = trim_trajectory(tp, kepler, th0=0.4, times=np.array([0.0]))
    assert traj.n_nodes == 1
    np.testing.assert_allclose(traj.states[0], [5.0, 0.0, 0.4, tp.v_th])


def test_trim_trajectory_solves_dynamics(kepler):
    tp = solve_trim(kepler, {"s": 5.0, "u": U0}, guess=1.0)
    times = np.linspace(0, 30, 61)
    traj = trim_trajectory(tp, kepler, th0=0.0, times=times)
    for i in range(0, 61, 10):
        v_nominal = np.array([0.0, 0.0, tp.v_th, 0.0])
        resid = el_rhs(kepler, traj.state(i), tp.u) - v_nominal
        assert np.max(np.abs(resid)) < 1e-10
    assert traj.states[-1, 2] == pytest.approx(30.0 * tp.v_th, rel=1e-12)
    assert traj.states[-1, 2] == pytest.approx(30.0 * math.sqrt(KEPLER_K / 125.0),
                                               abs=1e-6)


def test_trim_trajectory_warns_on_cyclic_forcing(kepler):
    tp = TrimPoint(s=5.0, v_th=circular_orbit_rate(5.0), u=np.array([0.0, 0.3]),
                   residual=0.0)
    with pytest.warns(UserWarning, match="cyclic forcing"):
        trim_trajectory(tp, kepler, th0=0.0, times=np.linspace(0, 1, 3))


# --- distances --------------------------------------------------------------------

def test_distance_is_shape_velocity_when_surjective(kepler):
    assert manifold_distance(kepler, kepler_state(5.0)) == 0.0
    x = State(5.0, 0.3, 0.0, circular_orbit_rate(5.0))
    assert manifold_distance(kepler, x) == pytest.approx(0.3)


def test_distance_fallback_minimizes_residual(spring_model):
    from dataclasses import replace

    model = replace(spring_model, forcing_surjective=False)
    # f_s = u can still zero the residual, so only |v_s| remains.
    x = State(2.0, 0.25, 0.0, 1.0)
    assert manifold_distance(model, x) == pytest.approx(0.25, abs=1e-9)


def test_distance_fallback_with_dead_forcing(unit_model):
    from dataclasses import replace

    dead = replace(unit_model, f_s=lambda u: 0.0,
                   f_s_jac=lambda u: np.zeros(1), forcing_surjective=False,
                   pot=lambda s: s, pot_d=lambda s: 1.0, pot_dd=lambda s: 0.0)
    # No control authority: residual stays -V' = -1.
    x = State(1.0, 0.5, 0.0, 0.0)
    assert manifold_distance(dead, x) == pytest.approx(1.5, abs=1e-9)


def test_combined_residual(kepler):
    tp = solve_trim(kepler, {"s": 5.3, "u": U0}, guess=1.0)
    x = State(tp.s, 0.0, 0.0, tp.v_th)
    assert combined_residual(kepler, x, tp.u) < 1e-10
    x_off = State(5.3, 0.4, 0.0, tp.v_th)
    assert combined_residual(kepler, x_off, tp.u) == pytest.approx(0.4, abs=1e-10)
    assert combined_residual(kepler, x_off, tp.u, w=0.0) == pytest.approx(0.4)
