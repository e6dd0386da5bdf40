import itertools

import numpy as np
import pytest
import scipy.sparse as sp

from trimoc.nlp import (
    NlpProblem,
    QpMultipliers,
    SqpOptions,
    kkt_residuals,
    qp_solve,
    solve_sqp,
)


def rosenbrock_problem():
    def f(x):
        return (1 - x[0])**2 + 100 * (x[1] - x[0]**2)**2

    def g(x):
        return np.array([-2 * (1 - x[0]) - 400 * x[0] * (x[1] - x[0]**2),
                         200 * (x[1] - x[0]**2)])

    return NlpProblem(n=2, objective=f, gradient=g)


def equality_qp_problem():
    return NlpProblem(
        n=2,
        objective=lambda x: 0.5 * float(x @ x),
        gradient=lambda x: x.copy(),
        eq_con=lambda x: np.array([x[0] + x[1] - 1.0]),
        eq_jac=lambda x: np.ones((1, 2)),
    )


# --- solve_sqp ---------------------------------------------------------------

def test_rosenbrock(fn=None):
    sol = solve_sqp(rosenbrock_problem(), np.array([-1.2, 1.0]))
    assert sol.status == "converged"
    assert np.linalg.norm(sol.x_star - 1.0) < 1e-6


def test_equality_qp_hand_solution():
    # Hand KKT: x + mu * [1,1] = 0 with x1 + x2 = 1 -> x = (1/2, 1/2), mu = -1/2.
    sol = solve_sqp(equality_qp_problem(), np.zeros(2))
    assert sol.status == "converged"
    np.testing.assert_allclose(sol.x_star, [0.5, 0.5], atol=1e-12)
    assert sol.mult_eq[0] == pytest.approx(-0.5, abs=1e-12)
    assert max(sol.kkt_residuals.values()) <= 1e-12


def test_contradictory_bounds_immediately_infeasible():
    problem = NlpProblem(n=1, objective=lambda x: float(x[0]**2),
                         gradient=lambda x: 2 * x,
                         lower=np.array([1.0]), upper=np.array([0.0]))
    sol = solve_sqp(problem, np.array([0.5]))
    assert sol.status == "infeasible"
    assert sol.iterations == 0


def test_inconsistent_linearization_infeasible():
    # c(x) = x^2 + 1 = 0 has no root; at x = 0 the linearization is 0*d = -1.
    problem = NlpProblem(
        n=1,
        objective=lambda x: float(x[0]**2),
        gradient=lambda x: 2 * x,
        eq_con=lambda x: np.array([x[0]**2 + 1.0]),
        eq_jac=lambda x: np.array([[2 * x[0]]]),
    )
    sol = solve_sqp(problem, np.zeros(1))
    assert sol.status == "infeasible"


def test_active_inequality_multiplier_sign():
    # min (x+1)^2 s.t. -x <= 0; optimum x = 0 with positive multiplier.
    problem = NlpProblem(
        n=1,
        objective=lambda x: float((x[0] + 1.0)**2),
        gradient=lambda x: np.array([2 * (x[0] + 1.0)]),
        ineq_con=lambda x: np.array([-x[0]]),
        ineq_jac=lambda x: np.array([[-1.0]]),
    )
    sol = solve_sqp(problem, np.array([2.0]))
    assert sol.status == "converged"
    assert sol.x_star[0] == pytest.approx(0.0, abs=1e-10)
    assert sol.mult_ineq[0] >= -1e-8
    assert sol.kkt_residuals["complementarity"] <= 1e-8


def test_bfgs_matrix_stays_positive_definite():
    sol = solve_sqp(rosenbrock_problem(), np.array([-1.2, 1.0]))
    assert np.min(np.linalg.eigvalsh(sol.hessian_final)) > 0


def test_deterministic_iterates():
    a = solve_sqp(rosenbrock_problem(), np.array([-1.2, 1.0]))
    b = solve_sqp(rosenbrock_problem(), np.array([-1.2, 1.0]))
    np.testing.assert_array_equal(a.x_star, b.x_star)
    assert a.history == b.history


def test_validate_flag_catches_wrong_gradient():
    problem = NlpProblem(n=2, objective=lambda x: float(x @ x),
                         gradient=lambda x: 3.0 * x, validate=True)
    with pytest.raises(ValueError, match="gradient"):
        solve_sqp(problem, np.array([1.0, 2.0]))


def test_validate_flag_catches_wrong_jacobian():
    problem = NlpProblem(
        n=2, objective=lambda x: float(x @ x), gradient=lambda x: 2 * x,
        eq_con=lambda x: np.array([x[0] * x[1] - 1.0]),
        eq_jac=lambda x: np.array([[x[1], 2 * x[0]]]),
        validate=True,
    )
    with pytest.raises(ValueError, match="Jacobian"):
        solve_sqp(problem, np.array([1.0, 1.0]))


def test_iteration_log_csv(tmp_path):
    path = tmp_path / "iters.csv"
    solve_sqp(rosenbrock_problem(), np.array([-1.2, 1.0]),
              SqpOptions(log_path=str(path)))
    lines = path.read_text().splitlines()
    assert lines[0] == "iter,objective,stationarity,feasibility,step_norm,penalty"
    assert len(lines) > 5


def test_fd_exact_hessian_mode():
    sol = solve_sqp(rosenbrock_problem(), np.array([-1.2, 1.0]),
                    SqpOptions(hessian="fd-exact", max_iter=100))
    assert sol.status == "converged"
    assert np.linalg.norm(sol.x_star - 1.0) < 1e-6


def test_gauss_newton_requires_hess():
    with pytest.raises(ValueError, match="hess"):
        solve_sqp(rosenbrock_problem(), np.zeros(2),
                  SqpOptions(hessian="gauss-newton"))


def test_gauss_newton_mode_with_hess():
    problem = NlpProblem(
        n=2,
        objective=lambda x: 0.5 * float((x[0] - 3)**2 + 2 * (x[1] + 1)**2),
        gradient=lambda x: np.array([x[0] - 3, 2 * (x[1] + 1)]),
        hess=lambda x: np.diag([1.0, 2.0]),
    )
    sol = solve_sqp(problem, np.zeros(2), SqpOptions(hessian="gauss-newton"))
    assert sol.status == "converged"
    np.testing.assert_allclose(sol.x_star, [3.0, -1.0], atol=1e-10)


def test_sparse_jacobian_inputs():
    problem = NlpProblem(
        n=3,
        objective=lambda x: 0.5 * float(x @ x),
        gradient=lambda x: x.copy(),
        eq_con=lambda x: np.array([x[0] + x[1] + x[2] - 3.0]),
        eq_jac=lambda x: sp.csr_matrix(np.ones((1, 3))),
        hess=lambda x: sp.identity(3, format="csr"),
    )
    sol = solve_sqp(problem, np.zeros(3), SqpOptions(hessian="gauss-newton"))
    assert sol.status == "converged"
    np.testing.assert_allclose(sol.x_star, np.ones(3), atol=1e-10)


def test_evaluation_error_at_start():
    problem = NlpProblem(n=1, objective=lambda x: float("nan"),
                         gradient=lambda x: np.zeros(1))
    sol = solve_sqp(problem, np.zeros(1))
    assert sol.status == "evaluation_error"


def test_options_validation():
    with pytest.raises(ValueError):
        SqpOptions(tol=-1.0)
    with pytest.raises(ValueError):
        SqpOptions(hessian="newton")


def test_wrong_x0_shape_rejected():
    with pytest.raises(ValueError):
        solve_sqp(rosenbrock_problem(), np.zeros(3))


# --- qp_solve ----------------------------------------------------------------

def test_qp_unconstrained_newton_step():
    h = np.diag([1.0, 2.0, 4.0])
    g = np.array([1.0, 2.0, 3.0])
    d, mult = qp_solve(h, g)
    np.testing.assert_allclose(d, -np.linalg.solve(h, g), atol=1e-14)
    assert mult.eq.size == 0


def test_qp_single_equality():
    d, mult = qp_solve(np.eye(3), np.zeros(3),
                       a_eq=np.array([[1.0, 0.0, 0.0]]), b_eq=np.array([1.0]))
    np.testing.assert_allclose(d, [1.0, 0.0, 0.0], atol=1e-14)


def brute_force_qp(h, g, lo, hi):
    """Enumerate all active bound sets; return the best feasible KKT point."""
    n = len(g)
    best, best_val = None, np.inf
    for mask in itertools.product([None, "lo", "up"], repeat=n):
        fixed = {j: (lo[j] if kind == "lo" else hi[j])
                 for j, kind in enumerate(mask) if kind}
        free = [j for j in range(n) if j not in fixed]
        d = np.zeros(n)
        for j, val in fixed.items():
            d[j] = val
        if free:
            rhs = -(g[free] + h[np.ix_(free, list(fixed))] @ np.array(
                [fixed[j] for j in fixed]) if fixed else g[free])
            d_free = np.linalg.solve(h[np.ix_(free, free)], rhs)
            d[free] = d_free
        if np.all(d >= lo - 1e-12) and np.all(d <= hi + 1e-12):
            val = 0.5 * d @ h @ d + g @ d
            if val < best_val - 1e-15:
                best, best_val = d, val
    return best


def test_qp_active_bounds_against_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = rng.normal(size=(3, 3))
        h = a @ a.T + 0.5 * np.eye(3)
        g = rng.normal(size=3)
        lo, hi = -0.3 * np.ones(3), 0.3 * np.ones(3)
        d, mult = qp_solve(h, g, bounds=(lo, hi))
        expected = brute_force_qp(h, g, lo, hi)
        np.testing.assert_allclose(d, expected, atol=1e-9)
        # Signed bound multipliers close the stationarity identity.
        np.testing.assert_allclose(h @ d + g + mult.bounds, 0.0, atol=1e-9)
        assert np.all(mult.bounds[np.isclose(d, hi)] >= -1e-10)
        assert np.all(mult.bounds[np.isclose(d, lo)] <= 1e-10)


def test_qp_inequality_rows():
    # min 1/2|d|^2 - d1  s.t. d1 + d2 <= 0.5
    d, mult = qp_solve(np.eye(2), np.array([-1.0, 0.0]),
                       a_in=np.array([[1.0, 1.0]]), b_in=np.array([0.5]))
    np.testing.assert_allclose(d, [0.75, -0.25], atol=1e-12)
    assert mult.ineq[0] == pytest.approx(0.25, abs=1e-12)


# --- kkt_residuals --------------------------------------------------------------

def test_kkt_residuals_on_analytic_qp():
    problem = equality_qp_problem()
    mult = QpMultipliers(eq=np.array([-0.5]), ineq=np.zeros(0), bounds=np.zeros(2))
    res = kkt_residuals(problem, np.array([0.5, 0.5]), mult)
    assert max(res.values()) <= 1e-15


def test_kkt_residuals_detect_suboptimality():
    problem = rosenbrock_problem()
    mult = QpMultipliers(eq=np.zeros(0), ineq=np.zeros(0), bounds=np.zeros(2))
    res = kkt_residuals(problem, np.array([0.0, 0.0]), mult)
    assert res["stationarity"] > 1.0
    assert res["feasibility"] == 0.0


def test_kkt_feasibility_zero_on_feasible_point():
    problem = equality_qp_problem()
    mult = QpMultipliers(eq=np.zeros(1), ineq=np.zeros(0), bounds=np.zeros(2))
    res = kkt_residuals(problem, np.array([1.0, 0.0]), mult)
    assert res["feasibility"] == 0.0
