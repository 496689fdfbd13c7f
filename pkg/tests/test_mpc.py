import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import qp_enumerate
from safempc.geometry import contains, subset
from safempc.mpc.scalar import ScalarMpc, ScalarMpcParameters, ScalarSetting
from safempc.mpc.tube import (
    TerminalEmpty,
    TubeController,
    TubeMpcParameters,
    TubeSetting,
    estimate_delta,
)

BOX_M = np.array([[33.0, 0.0], [0.0, 33.0], [-33.0, 0.0], [0.0, -33.0]])


def tube_params(M=BOX_M, H=(1.0, 0.01, 0.01), x_r=(0.0, 0.0), Lam=np.zeros((2, 2)), lam=(0.0, 0.0), l=0.0):
    return TubeMpcParameters(Lam, np.array(lam), l, np.array(H), np.array(x_r), np.zeros(1), M)


@pytest.fixture(scope="module")
def short():
    return TubeController(tube_params(), TubeSetting(horizon=10))


# scalar controller

def test_scalar_policy_examples():
    mpc = ScalarMpc()
    assert mpc.policy(ScalarMpcParameters(2.0, 0.0), 0.0) == 0.0
    # the projection binds at s = 0: u <= (s_max - w_bar) / B
    assert mpc.policy(ScalarMpcParameters(11.0, 0.9), 0.0) == pytest.approx(0.9, abs=1e-12)
    wide = ScalarMpc(ScalarSetting(noise_bound=0.1))
    assert wide.policy(ScalarMpcParameters(11.0, 0.9), 0.0) == pytest.approx(0.0, abs=1e-12)


def test_scalar_roa_intervals():
    mpc = ScalarMpc()
    lo0, hi0 = mpc.region_of_attraction_1d(ScalarMpcParameters(2.0, 0.0))
    lo1, hi1 = mpc.region_of_attraction_1d(ScalarMpcParameters(11.0, 0.9))
    assert abs(lo0 + 8.9) <= 0.1 and abs(lo1 + 4.4) <= 0.1
    assert hi0 == hi1 == 0.1


@settings(max_examples=40, deadline=None)
@given(st.floats(0.5, 15.0), st.floats(-1.0, 1.0), st.floats(-9.0, 0.1))
def test_scalar_policy_respects_state_constraint(K, a_s, s):
    mpc = ScalarMpc()
    sset = mpc.setting
    p = ScalarMpcParameters(K, a_s)
    lo, hi = mpc.input_bounds(p, s)
    if hi < lo:
        return
    u = mpc.policy(p, s)
    assert sset.A * s + sset.B * u + sset.noise_bound <= sset.s_max + 1e-12


def test_scalar_feasible_grid_is_interval():
    mpc = ScalarMpc()
    p = ScalarMpcParameters(2.0, 0.0)
    grid = np.linspace(-12, 1, 131)
    flags = np.array([mpc.is_feasible(p, s) for s in grid])
    changes = np.flatnonzero(np.diff(flags.astype(int)))
    assert len(changes) == 2


def test_scalar_wide_action_rejected():
    mpc = ScalarMpc()
    p = ScalarMpcParameters(2.0, 0.0)
    assert not mpc.is_feasible_with_action(p, 0.0, 10.0)
    assert mpc.is_feasible_with_action(p, -1.0, mpc.policy(p, -1.0))


# tube controller

def test_zero_noise_has_no_tightening():
    ctrl = TubeController(tube_params(M=BOX_M * 1e6), TubeSetting(horizon=5))
    assert np.allclose(ctrl.c_tight, ctrl.setting.c_hat[None, :], atol=1e-5)


def test_tightening_monotone_in_noise(short):
    big = TubeController(tube_params(M=BOX_M / 2), TubeSetting(horizon=10))
    assert np.all(big.c_tight[1:] > short.c_tight[1:])


def test_terminal_set_invariant_and_inside_box(short):
    # the terminal constraint acts on the nominal state, disturbed by the N-step propagated noise
    T = short.terminal_set
    WN = short.W_verts @ short.AN.T
    for x in T.vertex_cloud():
        for w in WN:
            assert contains(T, short.A_K @ (x - short.params.x_r) + short.params.x_r + w, tol=1e-8)
    assert subset(short.mrpi, short.setting.state_box)


def test_value_at_reference_is_zero_without_noise():
    ctrl = TubeController(tube_params(M=BOX_M * 1e6), TubeSetting(horizon=5))
    assert ctrl.value(np.zeros(2)) == pytest.approx(0.0, abs=1e-8)


def test_value_matches_enumeration_oracle():
    ctrl = TubeController(tube_params(H=(1.0, 0.1, 0.01)), TubeSetting(horizon=3))
    rng = np.random.default_rng(3)
    n = 0
    for s in rng.uniform(-0.9, 0.9, size=(40, 2)):
        prob, free, _, ok = ctrl._qp(s)
        sol = ctrl.solve(s)
        ref = qp_enumerate(prob.hessian, prob.gradient, prob.in_matrix, prob.in_rhs)
        assert sol.feasible == (ref is not None and ok)
        if sol.feasible:
            assert sol.value == pytest.approx(ref[1] + ctrl._constant(s, free), rel=1e-8, abs=1e-8)
            n += 1
    assert n > 5


def test_action_value_at_policy_equals_value(short):
    for s in ([0.5, 0.1], [-0.3, 0.4], [0.0, 0.0]):
        u = short.policy(s)
        assert short.action_value(s, u) == pytest.approx(short.value(s), abs=1e-6)


def test_action_value_convex_in_action(short):
    s = np.array([0.4, -0.2])
    a, b = -1.0, 1.5
    qa, qb, qm = short.action_value(s, a), short.action_value(s, b), short.action_value(s, 0.5 * (a + b))
    assert qm <= 0.5 * (qa + qb) + 1e-8


def test_value_nonnegative_without_initial_cost(short):
    rng = np.random.default_rng(1)
    for s in rng.uniform(-0.9, 0.9, size=(10, 2)):
        v = short.value(s)
        assert v >= -1e-9


def test_infeasible_outside_box(short):
    assert not short.is_feasible(np.array([1.2, 0.0]))
    assert short.value(np.array([1.2, 0.0])) == np.inf


def test_recursive_feasibility_under_model(short):
    rng = np.random.default_rng(2)
    m = short.setting.model
    for s in rng.uniform(-0.9, 0.9, size=(15, 2)):
        if not short.is_feasible(s):
            continue
        u = short.policy(s)
        for w in short.W_verts:
            assert short.is_feasible(m.predict(s, u) + w)


def test_lyapunov_decrease_with_estimated_delta(short):
    rng = np.random.default_rng(4)
    S = rng.uniform(-0.8, 0.8, size=(12, 2))
    d = estimate_delta(short, S, 0.9)
    m = short.setting.model
    for s in S:
        sol = short.solve(s)
        if not sol.feasible:
            continue
        for w in short.W_verts:
            assert short.value(m.predict(s, sol.action) + w) <= 0.9 * sol.value + d + 1e-8


def test_delta_zero_without_noise():
    ctrl = TubeController(tube_params(M=BOX_M * 1e6), TubeSetting(horizon=10))
    S = np.array([[0.5, 0.0], [-0.4, 0.3], [0.1, -0.5]])
    assert estimate_delta(ctrl, S, 0.999) == pytest.approx(0.0, abs=1e-5)


def test_delta_monotone_in_noise_scaling(short):
    big = TubeController(tube_params(M=BOX_M / 2), TubeSetting(horizon=10))
    S = np.array([[0.3, 0.0], [0.0, 0.0], [-0.5, 0.2]])
    assert estimate_delta(big, S, 0.9) >= estimate_delta(short, S, 0.9) - 1e-9


def test_level_set_membership(short):
    assert short.level_set_membership(np.array([0.0, 0.0]), 1.0, 0.9) in (True, False)
    s = np.array([0.5, 0.0])
    v = short.value(s)
    assert short.level_set_membership(s, v * 0.1 + 1e-9, 0.9)
    assert not short.level_set_membership(s, 0.0, 0.9)


def test_terminal_empty_when_noise_too_large():
    with pytest.raises(TerminalEmpty):
        TubeController(tube_params(M=BOX_M / 100), TubeSetting(horizon=10))


def test_policy_at_reference_returns_u_r():
    ctrl = TubeController(tube_params(x_r=(0.3, 0.0)), TubeSetting(horizon=10))
    assert ctrl.policy(np.array([0.3, 0.0]))[0] == pytest.approx(0.0, abs=1e-8)


def test_parameter_vector_round_trip():
    p = tube_params(H=(2.0, 0.5, 0.1), x_r=(0.2, 0.0), lam=(0.1, -0.2), l=3.0)
    q = TubeMpcParameters.from_vector(p.vector())
    assert np.array_equal(q.vector(), p.vector())
    assert p.digest() == q.digest()
