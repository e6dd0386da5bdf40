"""Shared fixtures; the expensive solves are session-scoped and reused."""

import time
from dataclasses import replace

import numpy as np
import pytest

from trimoc.app import kepler_model, preset_fig1, preset_fig2
from trimoc.model import MechModel
from trimoc.ocp import solve_ocp, solve_tocp


@pytest.fixture(scope="session")
def kepler():
    return kepler_model()


@pytest.fixture(scope="session")
def fig1_spec():
    return preset_fig1()


@pytest.fixture(scope="session")
def fig2_spec():
    return preset_fig2()


@pytest.fixture(scope="session")
def fig1_solution(fig1_spec):
    started = time.perf_counter()
    sol = solve_ocp(fig1_spec)
    return sol, time.perf_counter() - started


@pytest.fixture(scope="session")
def fig2_solution(fig2_spec):
    return solve_ocp(fig2_spec)


@pytest.fixture(scope="session")
def fig2_solution_t30(fig2_spec):
    return solve_ocp(replace(fig2_spec, horizon=30.0, intervals=60))


@pytest.fixture(scope="session")
def fig2_tocp(fig2_spec):
    spec = fig2_spec
    return solve_tocp(spec.model, spec.cost, spec.x0.th, spec.x0.v_th,
                      spec.horizon, spec.intervals, s_guess=spec.x0.s)


def make_unit_model(control_dim: int = 1) -> MechModel:
    """Identity mass blocks, no potential, direct shape forcing."""
    return MechModel(
        m11=lambda s: 1.0, m11_d=lambda s: 0.0, m11_dd=lambda s: 0.0,
        m22=lambda s: 1.0, m22_d=lambda s: 0.0, m22_dd=lambda s: 0.0,
        pot=lambda s: 0.0, pot_d=lambda s: 0.0, pot_dd=lambda s: 0.0,
        f_s=lambda u: float(u[0]),
        f_s_jac=lambda u: np.eye(control_dim)[0],
        f_th=lambda u: 0.0,
        f_th_jac=lambda u: np.zeros(control_dim),
        control_dim=control_dim,
        s_min=-1e6,
        forcing_surjective=True,
        orthogonal_forcing=True,
    )


def make_spring_model() -> MechModel:
    """Unit masses with a quadratic potential; scalar forcing on the shape.

    Trim residual is u - s, which makes stationarity systems solvable by
    hand.
    """
    return MechModel(
        m11=lambda s: 1.0, m11_d=lambda s: 0.0, m11_dd=lambda s: 0.0,
        m22=lambda s: 1.0, m22_d=lambda s: 0.0, m22_dd=lambda s: 0.0,
        pot=lambda s: 0.5 * s**2, pot_d=lambda s: s, pot_dd=lambda s: 1.0,
        f_s=lambda u: float(u[0]),
        f_s_jac=lambda u: np.array([1.0]),
        f_th=lambda u: 0.0,
        f_th_jac=lambda u: np.array([0.0]),
        control_dim=1,
        s_min=-1e6,
        forcing_surjective=True,
        orthogonal_forcing=True,
    )


@pytest.fixture
def unit_model():
    return make_unit_model()


@pytest.fixture
def spring_model():
    return make_spring_model()
