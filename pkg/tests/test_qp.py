import numpy as np
import pytest

from oracles import active_set_solve, random_feasible_qp
from trajopt_policy import qp
from trajopt_policy.gradcheck import central_difference, relative_error


def box_1d(qval):
    return qp.QpProblem(np.eye(1), np.array([qval]),
                        np.array([[1.0], [-1.0]]), np.array([1.0, 1.0]))


def test_interior_optimum():
    sol = qp.solve(box_1d(0.7))
    assert sol.status is qp.SolveStatus.SOLVED
    assert sol.z == pytest.approx([-0.7], abs=1e-7)
    assert np.all(sol.lam <= 1e-7)


def test_clipped_optimum_with_dual():
    sol = qp.solve(box_1d(3.0))
    assert sol.status is qp.SolveStatus.SOLVED
    assert sol.z == pytest.approx([-1.0], abs=1e-7)
    # stationarity z + 3 - lam = 0 at z = -1 pins the lower-bound dual at 2
    assert sol.lam[1] == pytest.approx(2.0, abs=1e-7)


def test_contradictory_bounds_infeasible():
    prob = qp.QpProblem(np.eye(1), np.zeros(1),
                        np.array([[1.0], [-1.0]]), np.array([-1.0, -1.0]))
    assert qp.solve(prob).status is qp.SolveStatus.INFEASIBLE


def test_validation_errors():
    with pytest.raises(ValueError, match="positive definite"):
        qp.QpProblem(-np.eye(2), np.zeros(2), np.zeros((1, 2)), np.zeros(1))
    with pytest.raises(ValueError, match="finite"):
        qp.QpProblem(np.eye(1), np.array([np.nan]), np.zeros((1, 1)), np.zeros(1))
    with pytest.raises(ValueError, match="columns"):
        qp.QpProblem(np.eye(2), np.zeros(2), np.zeros((1, 3)), np.zeros(1))


def test_symmetrized_at_construction():
    P = np.array([[2.0, 1e-11], [0.0, 2.0]])
    prob = qp.QpProblem(P, np.zeros(2), np.zeros((0, 2)), np.zeros(0))
    assert np.array_equal(prob.P, prob.P.T)


def test_matches_active_set_oracle():
    rng = np.random.default_rng(11)
    for _ in range(60):
        P, q, G, h, _ = random_feasible_qp(rng)
        prob = qp.QpProblem(P, q, G, h)
        sol = qp.solve(prob)
        assert sol.status is qp.SolveStatus.SOLVED
        z_oracle = active_set_solve(P, q, G, h)
        assert z_oracle is not None
        assert np.max(np.abs(sol.z - z_oracle)) <= 1e-6


def test_solved_invariants_on_random_problems():
    rng = np.random.default_rng(12)
    for _ in range(60):
        P, q, G, h, _ = random_feasible_qp(rng)
        prob = qp.QpProblem(P, q, G, h)
        sol = qp.solve(prob)
        assert sol.status is qp.SolveStatus.SOLVED
        assert np.min(sol.lam) >= -1e-9
        assert np.max(prob.G @ sol.z - prob.h) <= 1e-8
        st, pf, comp = qp.check_kkt(prob, sol)
        assert st <= 1e-8 and pf <= 1e-8 and comp <= 1e-8
        # duals complementary
        assert np.max(np.abs(sol.lam * (prob.G @ sol.z - prob.h))) <= 1e-8


def test_scale_equivariance():
    rng = np.random.default_rng(13)
    for _ in range(20):
        P, q, G, h, _ = random_feasible_qp(rng, n_max=6, m_max=12)
        c = float(rng.uniform(0.2, 5.0))
        z1 = qp.solve(qp.QpProblem(P, q, G, h), tol=1e-10).z
        z2 = qp.solve(qp.QpProblem(c * P, c * q, G, h), tol=1e-10).z
        assert np.max(np.abs(z1 - z2)) <= 1e-8


def test_batch_solve_bitwise_equal():
    rng = np.random.default_rng(14)
    probs = [qp.QpProblem(*random_feasible_qp(rng, n_max=5, m_max=10)[:4])
             for _ in range(8)]
    batch = qp.solve_batch(probs)
    singles = [qp.solve(p) for p in probs]
    for a, b in zip(batch, singles):
        assert a.z.tobytes() == b.z.tobytes()
        assert a.lam.tobytes() == b.lam.tobytes()
        assert a.iterations == b.iterations


def test_check_kkt_hand_built_and_perturbed():
    prob = box_1d(3.0)
    z = np.array([-1.0])
    lam = np.array([0.0, 2.0])
    sol = qp.QpSolution(z, lam, qp.SolveStatus.SOLVED, 0, 0, 0, 0)
    st, pf, comp = qp.check_kkt(prob, sol)
    assert st <= 1e-12 and pf <= 1e-12 and comp <= 1e-12

    sol_bad = qp.QpSolution(z + 1e-3, lam, qp.SolveStatus.SOLVED, 0, 0, 0, 0)
    st, pf, comp = qp.check_kkt(prob, sol_bad)
    assert st >= 1e-4

    rng = np.random.default_rng(15)
    P, q, G, h, _ = random_feasible_qp(rng, n_max=4, m_max=8)
    prob2 = qp.QpProblem(P, q, G, h)
    sol_rand = qp.QpSolution(rng.normal(size=len(q)), np.abs(rng.normal(size=len(h))),
                             qp.SolveStatus.SOLVED, 0, 0, 0, 0)
    assert max(qp.check_kkt(prob2, sol_rand)) > 1e-8


def test_backward_inactive_is_linear_solve():
    rng = np.random.default_rng(16)
    M = rng.normal(size=(4, 4))
    P = M.T @ M + np.eye(4)
    q = rng.normal(size=4)
    G = np.vstack([np.eye(4), -np.eye(4)])
    h = 1e3 * np.ones(8)
    prob = qp.QpProblem(P, q, G, h)
    sol = qp.solve(prob, tol=1e-12)
    g = rng.normal(size=4)
    _, grad_q = qp.backward(prob, sol, g)
    assert np.allclose(grad_q, -np.linalg.solve(prob.P, g), atol=1e-8)


def test_backward_clipped_is_locally_constant():
    sol = qp.solve(box_1d(3.0), tol=1e-12)
    _, grad_q = qp.backward(box_1d(3.0), sol, np.array([1.0]))
    assert abs(grad_q[0]) <= 1e-8


def test_backward_rejects_failed_solution():
    prob = qp.QpProblem(np.eye(1), np.zeros(1),
                        np.array([[1.0], [-1.0]]), np.array([-1.0, -1.0]))
    sol = qp.solve(prob)
    with pytest.raises(ValueError, match="infeasible"):
        qp.backward(prob, sol, np.zeros(1))


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(17)
    checked = 0
    while checked < 12:
        P, q, G, h, _ = random_feasible_qp(rng, n_max=6, m_max=12)
        prob = qp.QpProblem(P, q, G, h)
        sol = qp.solve(prob, tol=1e-11)
        assert sol.status is qp.SolveStatus.SOLVED
        slack = prob.h - prob.G @ sol.z
        if np.min(slack + sol.lam) < 1e-3:
            continue
        c = rng.normal(size=prob.n)
        grad_P, grad_q = qp.backward(prob, sol, c)

        fd_q = central_difference(
            lambda v: c @ qp.solve(qp.QpProblem(P, v, G, h), tol=1e-11).z, q)
        assert relative_error(grad_q, fd_q, 1e-3) <= 1e-3
        fd_P = central_difference(
            lambda v: c @ qp.solve(
                qp.QpProblem(v.reshape(P.shape), q, G, h), tol=1e-11).z,
            P.reshape(-1))
        assert relative_error(grad_P.reshape(-1), fd_P, 1e-3) <= 1e-3
        checked += 1


def test_backward_weakly_active_raises_then_regularized_retry():
    # optimum exactly on a constraint with a zero dual: z* = 0 against z <= 0
    prob = qp.QpProblem(np.eye(1), np.zeros(1), np.array([[1.0]]), np.zeros(1))
    sol = qp.QpSolution(np.zeros(1), np.zeros(1), qp.SolveStatus.SOLVED,
                        0, 0.0, 0.0, 0.0)
    with pytest.raises(qp.SingularKktError) as err:
        qp.backward(prob, sol, np.ones(1))
    assert err.value.cond_estimate > 1e10 or np.isinf(err.value.cond_estimate)
    grad_P, grad_q = qp.backward(prob, sol, np.ones(1), dual_reg=1e-10)
    assert np.all(np.isfinite(grad_P)) and np.all(np.isfinite(grad_q))


def test_grad_P_symmetrized():
    rng = np.random.default_rng(18)
    P, q, G, h, _ = random_feasible_qp(rng, n_max=5, m_max=10)
    prob = qp.QpProblem(P, q, G, h)
    sol = qp.solve(prob, tol=1e-11)
    grad_P, _ = qp.backward(prob, sol, rng.normal(size=prob.n))
    assert np.array_equal(grad_P, grad_P.T)
