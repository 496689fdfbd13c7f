import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import lp_vertices_2d, qp_enumerate, scalar_dare
from safempc.solvers import (
    NonConvex,
    NotStabilizable,
    QpProblem,
    Status,
    dare,
    dare_tangent,
    kkt_residuals,
    riccati_map,
    solve_lp,
    solve_qp,
)


def random_qp(rng, n=5, m=3, n_eq=0):
    L = rng.normal(size=(n, n))
    H = L @ L.T + 0.1 * np.eye(n)
    g = rng.normal(size=n)
    A = rng.normal(size=(m, n))
    x_feas = rng.normal(size=n)
    b = A @ x_feas + rng.uniform(0.0, 1.0, size=m)
    E = rng.normal(size=(n_eq, n))
    e = E @ x_feas
    return H, g, A, b, E, e


def test_unconstrained_scalar():
    s = solve_qp(QpProblem([[1.0]], [3.0]))
    assert s.primal[0] == pytest.approx(-3.0)
    assert s.value == pytest.approx(-4.5)


def test_active_lower_bound():
    s = solve_qp(QpProblem([[1.0]], [0.0], in_matrix=[[-1.0]], in_rhs=[-1.0]))
    assert s.primal[0] == pytest.approx(1.0)
    assert s.dual_in[0] == pytest.approx(1.0)
    assert s.active_set == [0]


def test_lp_interval_max():
    s = solve_lp([-1.0], [[1.0], [-1.0]], [1.0, 1.0])
    assert s.status is Status.OPTIMAL
    assert s.primal[0] == pytest.approx(1.0)


def test_lp_infeasible_pair():
    assert solve_lp([1.0], [[1.0], [-1.0]], [0.0, -1.0]).status is Status.INFEASIBLE


def test_lp_unbounded():
    assert solve_lp([-1.0, 0.0], [[-1.0, 0.0]], [1.0]).status is Status.UNBOUNDED


def test_nonsymmetric_rejected():
    with pytest.raises(ValueError):
        QpProblem([[1.0, 1.0], [0.0, 1.0]], [0.0, 0.0])


def test_nonconvex_detected():
    with pytest.raises(NonConvex):
        solve_qp(QpProblem([[-1.0]], [0.0], in_matrix=[[1.0], [-1.0]], in_rhs=[1.0, 1.0]))


@pytest.mark.parametrize("seed", range(40))
def test_random_qp_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    H, g, A, b, *_ = random_qp(rng)
    sol = solve_qp(QpProblem(H, g, in_matrix=A, in_rhs=b))
    x_ref, v_ref = qp_enumerate(H, g, A, b)
    assert np.allclose(sol.primal, x_ref, atol=1e-8)
    assert sol.value == pytest.approx(v_ref, abs=1e-8)
    res = kkt_residuals(QpProblem(H, g, in_matrix=A, in_rhs=b), sol)
    assert max(res.values()) <= 1e-8


@pytest.mark.parametrize("seed", range(20))
def test_random_qp_with_equalities(seed):
    rng = np.random.default_rng(100 + seed)
    H, g, A, b, E, e = random_qp(rng, n=5, m=4, n_eq=2)
    p = QpProblem(H, g, E, e, A, b)
    sol = solve_qp(p)
    x_ref, _ = qp_enumerate(H, g, A, b, E, e)
    assert np.allclose(sol.primal, x_ref, atol=1e-8)
    assert max(kkt_residuals(p, sol).values()) <= 1e-8


@pytest.mark.parametrize("seed", range(40))
def test_random_lp_matches_vertices(seed):
    rng = np.random.default_rng(200 + seed)
    ang = np.sort(rng.uniform(0, 2 * np.pi, size=7))
    A = np.column_stack([np.cos(ang), np.sin(ang)])
    A = np.vstack([A, np.eye(2), -np.eye(2)])
    b = rng.uniform(0.5, 2.0, size=A.shape[0])
    c = rng.normal(size=2)
    sol = solve_lp(c, A, b)
    x_ref, v_ref = lp_vertices_2d(c, A, b)
    assert sol.value == pytest.approx(v_ref, abs=1e-8)
    p = QpProblem(np.zeros((2, 2)), c, in_matrix=A, in_rhs=b)
    assert max(kkt_residuals(p, sol).values()) <= 1e-8


def test_resolve_on_active_set_reproduces_primal():
    rng = np.random.default_rng(7)
    for _ in range(20):
        H, g, A, b, *_ = random_qp(rng, n=4, m=6)
        p = QpProblem(H, g, in_matrix=A, in_rhs=b)
        sol = solve_qp(p)
        again = solve_qp(p, working_set=sol.active_set)
        assert np.allclose(again.primal, sol.primal, atol=1e-10)


def test_deterministic():
    rng = np.random.default_rng(3)
    H, g, A, b, *_ = random_qp(rng, n=6, m=10)
    p = QpProblem(H, g, in_matrix=A, in_rhs=b)
    s1, s2 = solve_qp(p), solve_qp(p)
    assert np.array_equal(s1.primal, s2.primal)
    assert s1.active_set == s2.active_set


def test_degenerate_lp_terminates():
    # many constraints through the same vertex
    ang = np.linspace(0, np.pi / 2, 9)
    A = np.column_stack([np.cos(ang), np.sin(ang)])
    A = np.vstack([A, -np.eye(2)])
    b = np.concatenate([np.zeros(9), [1.0, 1.0]])
    sol = solve_lp([-1.0, -1.0], A, b)
    assert sol.status is Status.OPTIMAL
    assert sol.value == pytest.approx(0.0, abs=1e-10)


def test_dare_zero_dynamics():
    Q = np.diag([2.0, 3.0])
    P, K = dare(np.zeros((2, 2)), np.eye(2), Q, np.eye(2))
    assert np.allclose(P, Q)
    assert np.allclose(K, 0.0)


def test_dare_scalar_analytic():
    P, K = dare(1.1, 0.1, 1.0, 0.01)
    assert P[0, 0] == pytest.approx(scalar_dare(1.1, 0.1, 1.0, 0.01), rel=1e-10)
    assert abs(riccati_map(P, np.array([[1.1]]), np.array([[0.1]]), np.eye(1), 0.01 * np.eye(1)) - P).max() < 1e-10


def test_dare_tube_system_stable():
    A = np.array([[1.0, 0.1], [0.0, 1.0]])
    B = np.array([[0.05], [0.1]])
    P, K = dare(A, B, np.diag([1.0, 0.01]), np.array([[0.01]]))
    assert np.max(np.abs(np.linalg.eigvals(A - B @ K))) < 1.0


def test_dare_unstabilizable():
    with pytest.raises(NotStabilizable):
        dare(np.diag([2.0, 0.5]), np.array([[0.0], [1.0]]), np.eye(2), np.eye(1))


def test_dare_tangent_matches_differences():
    rng = np.random.default_rng(11)
    A = rng.normal(size=(2, 2))
    B = rng.normal(size=(2, 1))
    Q, R = np.eye(2), np.array([[0.5]])
    dQ = np.diag([0.3, -0.1])
    dR = np.array([[0.2]])
    P, K = dare(A, B, Q, R)
    dP, dK = dare_tangent(A, B, R, P, K, dQ, dR)
    h = 1e-6
    Pp, Kp = dare(A, B, Q + h * dQ, R + h * dR)
    Pm, Km = dare(A, B, Q - h * dQ, R - h * dR)
    assert np.allclose(dP, (Pp - Pm) / (2 * h), rtol=1e-5, atol=1e-6)
    assert np.allclose(dK, (Kp - Km) / (2 * h), rtol=1e-5, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_dare_residual_property(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(2, 2))
    B = rng.normal(size=(2, 1))
    P, K = dare(A, B, np.eye(2), np.eye(1))
    res = np.max(np.abs(riccati_map(P, A, B, np.eye(2), np.eye(1)) - P))
    assert res <= 1e-10 * max(1.0, np.max(np.abs(P)))
