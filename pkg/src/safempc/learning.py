"""Gradient estimation and constrained parameter updates."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from safempc import kernels
from safempc.mpc.scalar import ScalarMpc, ScalarMpcParameters
from safempc.solvers import QpProblem, Status, solve_qp


class LearningError(RuntimeError):
    pass


class GridTooCoarse(LearningError):
    pass


class ConstraintQpInfeasible(LearningError):
    pass


class PostCheckFailed(LearningError):
    def __init__(self, candidate, reason=""):
        super().__init__(f"post-check failed: {reason}")
        self.candidate = candidate
        self.reason = reason


class InfeasiblePoint(LearningError):
    pass


class GradientMethod(enum.Enum):
    EXACT_GRID = "exact_grid"
    ACTOR_CRITIC = "actor_critic"
    FINITE_DIFFERENCE = "finite_difference"
    Q_BATCH = "q_batch"


@dataclass
class GradientEstimate:
    grad: np.ndarray
    method: GradientMethod
    sample_count: int = 0
    value: float = float("nan")
    extra: dict = field(default_factory=dict)


@dataclass
class UpdateStepConfig:
    alpha: float = 1.0
    H_metric: np.ndarray = None
    rho: float = 0.9
    n_fail: int = 1

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not 0.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (0, 1)")
        if self.H_metric is not None:
            H = np.atleast_2d(np.asarray(self.H_metric, dtype=float))
            if np.linalg.eigvalsh(0.5 * (H + H.T))[0] <= 0:
                raise ValueError("H_metric must be positive definite")
            self.H_metric = H

    def metric(self, n):
        return np.eye(n) if self.H_metric is None else self.H_metric


@dataclass
class ThetaConstraintSet:
    """Linear constraints ``G theta <= h``, ``E theta = e`` plus nonlinear post-checks.

    Each post-check is a callable ``theta -> (ok, reason)``.
    """

    G: np.ndarray = None
    h: np.ndarray = None
    E: np.ndarray = None
    e: np.ndarray = None
    post_checks: list = field(default_factory=list)

    def arrays(self, n):
        G = np.zeros((0, n)) if self.G is None else np.atleast_2d(np.asarray(self.G, dtype=float)).reshape(-1, n)
        h = np.zeros(0) if self.h is None else np.atleast_1d(np.asarray(self.h, dtype=float))
        E = np.zeros((0, n)) if self.E is None else np.atleast_2d(np.asarray(self.E, dtype=float)).reshape(-1, n)
        e = np.zeros(0) if self.e is None else np.atleast_1d(np.asarray(self.e, dtype=float))
        return G, h, E, e

    def linear_violation(self, theta):
        theta = np.asarray(theta, dtype=float)
        G, h, E, e = self.arrays(theta.size)
        v = 0.0
        if G.shape[0]:
            v = max(v, float(np.max(G @ theta - h)))
        if E.shape[0]:
            v = max(v, float(np.max(np.abs(E @ theta - e))))
        return v

    def check(self, theta):
        for chk in self.post_checks:
            ok, reason = chk(theta)
            if not ok:
                return False, reason
        return True, ""


def constrained_step(theta_p, grad, cfg: UpdateStepConfig, constraints: ThetaConstraintSet, check=True):
    """Minimize 0.5|theta - theta_p|_H^2 + alpha grad'(theta - theta_p) over the constraint set."""
    theta_p = np.asarray(theta_p, dtype=float)
    grad = np.asarray(grad, dtype=float)
    n = theta_p.size
    if cfg.alpha == 0.0 or not np.any(grad):
        return theta_p.copy()
    G, h, E, e = constraints.arrays(n)
    H = cfg.metric(n)
    H = 0.5 * (H + H.T)
    # Jacobi scaling: solve for z with theta - theta_p = D z, D = diag(H)^-1/2
    d = 1.0 / np.sqrt(np.diag(H))
    Hs = H * d[:, None] * d[None, :]
    prob = QpProblem(0.5 * (Hs + Hs.T), cfg.alpha * grad * d, E * d, e - E @ theta_p, G * d, h - G @ theta_p)
    sol = solve_qp(prob)
    if sol.status is not Status.OPTIMAL:
        raise ConstraintQpInfeasible(f"update QP returned {sol.status.value}")
    theta = theta_p + d * sol.primal
    if check:
        ok, reason = constraints.check(theta)
        if not ok:
            raise PostCheckFailed(theta, reason)
    return theta


# scalar example: exact cost by grid value iteration

@dataclass(frozen=True)
class ScalarGrid:
    lo: float = -12.0
    hi: float = 1.0
    n: int = 1301
    n_quad: int = 16
    tol: float = 1e-10
    init_lo: float = 0.0
    init_hi: float = 0.1
    n_init: int = 101

    def refined(self):
        return ScalarGrid(self.lo, self.hi, 2 * self.n - 1, self.n_quad, self.tol, self.init_lo, self.init_hi,
                          self.n_init)


def scalar_value_function(params: ScalarMpcParameters, mpc: ScalarMpc, gamma=0.9, noise_bound=None,
                          grid: ScalarGrid = ScalarGrid(), max_iter=20000, V0=None):
    """Policy evaluation of the closed loop on a uniform grid, uniform noise by Gauss-Legendre.

    ``V0`` warm-starts the sweeps (same fixed point, fewer iterations).
    """
    st = mpc.setting
    wb = st.noise_bound if noise_bound is None else noise_bound
    x = np.linspace(grid.lo, grid.hi, grid.n)
    dx = x[1] - x[0]
    nodes, wts = np.polynomial.legendre.leggauss(grid.n_quad)
    w = wb * nodes
    wts = wts / 2.0
    u = mpc.policy_array(params, x)
    cost = st.stage_cost(x, u)
    succ = (st.A * x + st.B * u)[:, None] + w[None, :]
    succ = np.clip(succ, grid.lo, grid.hi)
    pos = (succ - grid.lo) / dx
    idx = np.minimum(np.floor(pos).astype(np.int64), grid.n - 2)
    frac = pos - idx
    V = np.zeros(grid.n) if V0 is None else np.array(V0, dtype=float)
    for _ in range(max_iter):
        V_next = kernels.bellman_sweep(V, cost, idx, frac, wts, gamma)
        if np.max(np.abs(V_next - V)) < grid.tol:
            return x, V_next
        V = V_next
    raise LearningError("value iteration did not converge")


def scalar_cost(params, mpc, gamma=0.9, noise_bound=None, grid: ScalarGrid = ScalarGrid(), V0=None,
                return_values=False):
    """Expected discounted cost with the initial state uniform on the boundary interval."""
    x, V = scalar_value_function(params, mpc, gamma, noise_bound, grid, V0=V0)
    s0 = np.linspace(grid.init_lo, grid.init_hi, grid.n_init)
    J = float(np.mean(np.interp(s0, x, V)))
    return (J, V) if return_values else J


def exact_grad_scalar(params: ScalarMpcParameters, mpc: ScalarMpc = None, gamma=0.9, noise_bound=None,
                      grid: ScalarGrid = ScalarGrid(), h=1e-4, richardson=True, rel_tol=1e-3):
    """Central finite differences of the grid cost in (K, a_s)."""
    mpc = mpc or ScalarMpc()
    J, V = scalar_cost(params, mpc, gamma, noise_bound, grid, return_values=True)
    if richardson:
        J_fine = scalar_cost(params, mpc, gamma, noise_bound, grid.refined())
        if abs(J_fine - J) > rel_tol * max(1.0, abs(J)):
            raise GridTooCoarse(f"grid refinement changed J by {abs(J_fine - J):.3e}")
    v = params.vector()
    g = np.zeros(2)
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        Jp = scalar_cost(ScalarMpcParameters.from_vector(v + e), mpc, gamma, noise_bound, grid, V0=V)
        Jm = scalar_cost(ScalarMpcParameters.from_vector(v - e), mpc, gamma, noise_bound, grid, V0=V)
        g[i] = (Jp - Jm) / (2 * h)
    return GradientEstimate(g, GradientMethod.EXACT_GRID, sample_count=grid.n, value=J)


def scalar_constraints(mpc: ScalarMpc, boundary_action="clipped") -> ThetaConstraintSet:
    """Linear step constraints for theta = (K, a_s).

    The boundary rows keep the unsaturated branch of the clipped boundary action,
    ``-K s_b + a_s <= (s_max - w_max - A s_b) / B``. The projected reading makes
    those rows vacuous, so only the stability rows remain.
    """
    st = mpc.setting
    G = [[-1.0, 0.0], [1.0, 0.0]]
    # A - B K in [-1 + eps, 1 - eps]
    h = [-(st.A - 1.0 + st.eps) / st.B, (st.A + 1.0 - st.eps) / st.B]
    if boundary_action == "clipped":
        for sb in st.boundary_states:
            G.append([-sb, 1.0])
            h.append((st.s_max - st.noise_bound - st.A * sb) / st.B)
    elif boundary_action != "projected":
        raise ValueError(f"unknown boundary_action {boundary_action!r}")

    def boundary_ok(theta):
        p = ScalarMpcParameters.from_vector(theta)
        acts = mpc.boundary_actions(p, projected=boundary_action == "projected")
        for sb, a in zip(st.boundary_states, acts):
            if st.A * sb + st.B * a + st.noise_bound > st.s_max + 1e-9:
                return False, f"boundary state {sb} leaves the constraint"
        return True, ""

    return ThetaConstraintSet(np.array(G), np.array(h), post_checks=[boundary_ok])


def scalar_step_with_feasibility(theta_i, s_i, grad, cfg: UpdateStepConfig, mpc: ScalarMpc,
                                 constraints: ThetaConstraintSet, max_shrink=400):
    """Step whose worst-case successors of the applied action stay in the new region of attraction.

    The lower endpoint of the region of attraction is linearized at theta_i and
    the candidate is post-checked; on failure alpha shrinks by rho.
    Returns ``(theta_next, alpha_used)``.
    """
    theta_i = np.asarray(theta_i, dtype=float)
    p_i = ScalarMpcParameters.from_vector(theta_i)
    s_wc = mpc.worst_case_successors(p_i, s_i)
    lower = mpc.region_of_attraction_1d(p_i)[0]
    dlow = mpc.roa_lower_gradient(p_i)
    G0, h0, E0, e0 = constraints.arrays(2)
    # lower(theta_i) + dlow'(theta - theta_i) <= min(s_wc)
    G = np.vstack([G0, dlow])
    # small margin so the bisected endpoint does not sit exactly on the successor
    margin = 1e-8 * max(1.0, abs(lower))
    h = np.concatenate([h0, [min(s_wc) - lower + dlow @ theta_i - margin]])
    cs = ThetaConstraintSet(G, h, E0 if E0.size else None, e0 if e0.size else None,
                            post_checks=list(constraints.post_checks))
    alpha = cfg.alpha
    for _ in range(max_shrink):
        step_cfg = UpdateStepConfig(alpha, cfg.H_metric, cfg.rho, cfg.n_fail)
        try:
            theta = constrained_step(theta_i, grad, step_cfg, cs)
        except PostCheckFailed:
            alpha *= cfg.rho
            continue
        p = ScalarMpcParameters.from_vector(theta)
        if all(mpc.is_feasible(p, x) for x in s_wc):
            return theta, alpha
        alpha *= cfg.rho
    return theta_i.copy(), 0.0


# tube example: batch Q-learning

@dataclass
class TubeStageCost:
    s_ref: np.ndarray = field(default_factory=lambda: np.array([-3.0, 0.0]))
    a_ref: np.ndarray = field(default_factory=lambda: np.zeros(1))
    weights: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.01, 0.01]))

    def __call__(self, s, a):
        d = np.concatenate([np.asarray(s, dtype=float) - self.s_ref, np.atleast_1d(a) - self.a_ref])
        return float(d @ (self.weights * d))


def q_batch_update_direction(ctrl, batch, gamma, stage_cost, solutions=None):
    """Residual-gradient direction of 0.5 * mean(delta_i^2) over one batch.

    ``delta_i = l(s_i, a_i) + gamma V(s_{i+1}) - Q(s_i, a_i)``. The applied actions are
    the greedy MPC actions, so ``Q(s_i, a_i)`` is read from the MPC solution at
    ``s_i``. ``solutions`` may carry already computed solutions keyed by state bytes.
    Returns the direction with the TD errors and their Jacobian in ``extra``.
    """
    solutions = {} if solutions is None else solutions

    def solved(s, a=None):
        key = (np.asarray(s, dtype=float).tobytes(), None if a is None else float(np.ravel(a)[0]))
        if key not in solutions:
            solutions[key] = ctrl.solve(s, a)
        return solutions[key]

    recs = list(batch)
    if not recs:
        raise ValueError("empty batch")
    deltas = np.zeros(len(recs))
    jac = np.zeros((len(recs), ctrl.theta.size))
    for i, r in enumerate(recs):
        sol_q = solved(r.s)
        if not sol_q.feasible or np.max(np.abs(sol_q.action - r.a)) > 1e-6:
            sol_q = solved(r.s, r.a)
        sol_v = solved(r.s_next)
        if not (sol_q.feasible and sol_v.feasible):
            raise InfeasiblePoint(f"batch state left the feasible set at record {i}")
        deltas[i] = stage_cost(r.s, r.a) + gamma * sol_v.value - sol_q.value
        jac[i] = gamma * ctrl.value_gradient(r.s_next, sol_v) - ctrl.value_gradient(r.s, sol_q)
    grad = jac.T @ deltas / len(recs)
    return GradientEstimate(grad, GradientMethod.Q_BATCH, len(recs), float(np.mean(np.abs(deltas))),
                            extra={"td": deltas, "jacobian": jac})


def gauss_newton_metric(jacobian, damping=1e-2, marquardt=1.0):
    """J'J / n with Marquardt scaling of its diagonal plus damping * I (metric of the batch Q step)."""
    J = np.asarray(jacobian, dtype=float)
    G = J.T @ J / J.shape[0]
    return G + marquardt * np.diag(np.diag(G)) + damping * np.eye(J.shape[1])


def tube_constraints(setting, data, model=None, check_terminal=True, tightening=None) -> ThetaConstraintSet:
    """Linear parameter set (weights, steady state, set membership) plus nonlinear post-checks.

    ``tightening`` is the terminal-stage tightening of the current controller; when
    given, the steady state is kept ``setting.terminal_margin`` inside it (the
    post-check then verifies the margin in the new terminal set exactly).
    """
    from safempc.geometry import Polytope
    from safempc.model import residuals
    from safempc.mpc.tube import LAYOUT, N_THETA, TubeController, TubeError, TubeMpcParameters

    model = model or setting.model
    rows, rhs = [], []
    for j in range(LAYOUT["H"].start, LAYOUT["H"].stop):
        g = np.zeros(N_THETA)
        g[j] = -1.0
        rows.append(g)
        rhs.append(-setting.h_min)
    # Lambda >= 0 through diagonal dominance: Lam11 >= |Lam12|, Lam22 >= |Lam12|
    for diag in (0, 2):
        for sign in (1.0, -1.0):
            g = np.zeros(N_THETA)
            g[diag] = -1.0
            g[1] = sign
            rows.append(g)
            rhs.append(0.0)
    # the steady state itself must satisfy the (tightened) constraints
    h_N = np.zeros(setting.C.shape[0]) if tightening is None else np.asarray(tightening, dtype=float)
    margin = 0.0 if tightening is None else setting.terminal_margin
    for i in range(setting.C.shape[0]):
        g = np.zeros(N_THETA)
        g[LAYOUT["x_r"]] = setting.C[i]
        g[LAYOUT["u_r"]] = setting.D[i]
        rows.append(g)
        rhs.append(-setting.c_hat[i] - h_N[i] - margin * np.linalg.norm(setting.C[i]))
    W = residuals(model, data)
    if len(W):
        pts = Polytope.from_vertices(W).vertex_cloud() if len(W) > 2 else W
        nx = model.nx
        for w in pts:
            for j in range(setting.n_facets):
                g = np.zeros(N_THETA)
                start = LAYOUT["M"].start + j * nx
                g[start:start + nx] = w
                rows.append(g)
                rhs.append(setting.m[j])
    nx = model.nx
    E = np.zeros((nx, N_THETA))
    E[:, LAYOUT["x_r"]] = model.A - np.eye(nx)
    E[:, LAYOUT["u_r"]] = model.B
    e = -model.b

    def lambda_psd(theta):
        L = np.array([[theta[0], theta[1]], [theta[1], theta[2]]])
        ok = np.linalg.eigvalsh(L)[0] >= -1e-12
        return ok, "" if ok else "Lambda is not positive semidefinite"

    def terminal_nonempty(theta):
        try:
            ctrl = TubeController(TubeMpcParameters.from_vector(theta), setting)
        except TubeError as exc:
            return False, f"derive failed: {exc}"
        T = ctrl.terminal_dev
        depth = np.min(T.offsets / np.linalg.norm(T.normals, axis=1))
        # half the margin of the linear row, leaving room for the nonlinear change of the tightening
        if depth < 0.5 * setting.terminal_margin:
            return False, f"steady state only {depth:.2e} inside the terminal set"
        return True, ""

    checks = [lambda_psd] + ([terminal_nonempty] if check_terminal else [])
    return ThetaConstraintSet(np.array(rows), np.array(rhs), E, e, post_checks=checks)
