"""The tube experiment: batch Q-learning of a robust tube MPC with a learned disturbance set."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from safempc.geometry import contains
from safempc.learning import (
    PostCheckFailed,
    TubeStageCost,
    UpdateStepConfig,
    constrained_step,
    gauss_newton_metric,
    q_batch_update_direction,
    tube_constraints,
)
from safempc.model import DataSet, TransitionRecord
from safempc.mpc.tube import TubeController, TubeMpcParameters, TubeSetting, estimate_delta
from safempc.safety import (
    AlphaUnderflow,
    GateMode,
    GateState,
    Outcome,
    SafetyViolation,
    backtrack_shrink,
    gate,
    propose,
)

from .config import ExperimentConfig
from .trace import RunTrace
from .truth import SimTruth


def initial_noise_matrix(prior_w, inflation=1.1):
    """Axis-aligned box around prior residuals, inflated, written as M w <= 1."""
    W = np.atleast_2d(prior_w)
    hi = W.max(axis=0) * inflation
    lo = W.min(axis=0) * inflation
    if np.any(hi <= 0) or np.any(lo >= 0):
        raise ValueError("prior residuals must surround the origin")
    return np.array([[1.0 / hi[0], 0.0], [0.0, 1.0 / hi[1]], [1.0 / lo[0], 0.0], [0.0, 1.0 / lo[1]]])


def initial_parameters(cfg: ExperimentConfig, M0):
    return TubeMpcParameters(np.zeros((2, 2)), np.zeros(2), cfg.init_l, np.array(cfg.init_H, dtype=float),
                             np.array(cfg.init_x_r, dtype=float), np.zeros(1), M0)


def level_grid(setting: TubeSetting, n=5, frac=0.9):
    g = np.linspace(-frac * setting.x_max, frac * setting.x_max, n)
    return np.array([[a, b] for a in g for b in g])


class _Controllers:
    """Small cache of controllers and their solutions, keyed by the parameter bytes."""

    def __init__(self, setting, size=6):
        self.setting = setting
        self.size = size
        self.items = OrderedDict()

    def get(self, theta):
        key = np.asarray(theta, dtype=float).tobytes()
        if key in self.items:
            self.items.move_to_end(key)
            return self.items[key]
        ctrl = TubeController(TubeMpcParameters.from_vector(theta), self.setting)
        ctrl.memo = {}
        ctrl.delta_hat = None
        self.items[key] = ctrl
        while len(self.items) > self.size:
            self.items.popitem(last=False)
        return ctrl

    def solve(self, theta, s, a=None):
        ctrl = self.get(theta)
        key = (np.asarray(s, dtype=float).tobytes(), None if a is None else float(np.ravel(a)[0]))
        if key not in ctrl.memo:
            ctrl.memo[key] = ctrl.solve(s, a)
        return ctrl.memo[key]


def run_tube_experiment(cfg: ExperimentConfig) -> RunTrace:
    if cfg.which != "tube":
        raise ValueError("configuration is not for the tube experiment")
    setting = TubeSetting(horizon=cfg.horizon)
    model = setting.model
    truth = SimTruth.octagon(cfg.seed, model, cfg.octagon_radius, cfg.octagon_phase)
    stage_cost = TubeStageCost(np.array(cfg.s_ref, dtype=float), np.zeros(1), np.array(cfg.stage_weights))

    data = DataSet()
    prior = np.array([truth.sample_noise() for _ in range(cfg.n_prior)])
    for w in prior:
        data.append(TransitionRecord(np.zeros(2), np.zeros(1), model.b + w))
    M0 = initial_noise_matrix(prior, cfg.prior_inflation)
    theta0 = initial_parameters(cfg, M0).vector()
    ctrls = _Controllers(setting)
    truth_verts = truth.noise_set.vertex_cloud()
    grid_states = level_grid(setting, cfg.telemetry_grid)

    trace = RunTrace(header={"experiment": "tube", "config": cfg.as_dict(), "seed": cfg.seed,
                             "theta0": theta0, "n_prior": cfg.n_prior})
    trace.extras["truth_vertices"] = truth_verts

    def evaluate(theta, s):
        sol = ctrls.solve(theta, s)
        return sol.feasible, (sol.action if sol.feasible else None)

    def telemetry(theta, recent):
        ctrl = ctrls.get(theta)
        if ctrl.delta_hat is None and cfg.telemetry:
            samples = np.vstack([grid_states, recent]) if len(recent) else grid_states
            ctrl.delta_hat = estimate_delta(ctrl, samples, cfg.gamma_lyap)
        return ctrl.delta_hat

    def noise_ok(theta):
        ctrl = ctrls.get(theta)
        M, m = ctrl.W.normals, ctrl.W.offsets
        truth_in = bool(np.all(truth_verts @ M.T <= m + 1e-12))
        return ctrl, truth_in

    s = np.array(cfg.tube_s0, dtype=float)
    state = GateState(theta0, alpha=cfg.tube_alpha, mode=GateMode.BACKTRACKING)
    grad = H_metric = None
    recent = []
    batch = []
    epoch = 0
    n_steps = cfg.epochs * cfg.batch
    telemetry(theta0, [s])
    for i in range(n_steps):
        prev_theta = state.theta_current
        v_cand = None
        if state.pending:
            cand = state.theta_candidate
        u, dec, state = gate(s, state, evaluate)
        if dec.reason.value != "no_candidate":
            sol_c = ctrls.solve(cand, s)
            v_cand = sol_c.value if sol_c.feasible else None
        if dec.outcome is Outcome.DEFERRED:
            def recompute(alpha, theta_p=state.theta_current, g=grad, Hm=H_metric):
                return constrained_step(theta_p, g, UpdateStepConfig(alpha, Hm, cfg.rho, cfg.n_fail), cons)

            try:
                state = backtrack_shrink(state, recompute, cfg.rho, cfg.n_fail)
            except AlphaUnderflow:
                state = GateState(state.theta_current, alpha=cfg.tube_alpha, mode=state.mode, proposal=state.proposal)
        theta = state.theta_current
        sol = ctrls.solve(theta, s)
        ctrl, truth_in = noise_ok(theta)
        if not np.array_equal(theta, prev_theta) or i == 0:
            resid = np.array([r.s_next - model.predict(r.s, r.a) for r in data])
            all_in = bool(np.all(resid @ ctrl.W.normals.T <= ctrl.W.offsets + 1e-9))
        delta_hat = telemetry(theta, np.array(recent[-cfg.batch:]) if recent else np.zeros((0, 2)))
        s_next, w = truth.step(s, u)
        in_W = bool(np.all(ctrl.W.normals @ w <= ctrl.W.offsets + 1e-9))
        all_in = all_in and in_W
        in_level = None
        if delta_hat is not None:
            in_level = bool(sol.value <= delta_hat / (1.0 - cfg.gamma_lyap))
        v_prev = None
        if dec.outcome is Outcome.APPLIED and not np.array_equal(theta, prev_theta):
            v_prev = ctrls.solve(prev_theta, s).value
        prop = state.proposal if dec.reason.value != "no_candidate" else None
        trace.add_step(step=i, epoch=epoch, state=s, action=u, noise=w, theta=theta, theta_hash=_hash(theta),
                       feasible=True, v_hat=sol.value, v_candidate=v_cand, v_previous=v_prev,
                       decision=dec.as_dict(), proposal=prop, residual_in_W=in_W, data_in_W=all_in,
                       truth_in_W=truth_in, in_mrpi=bool(contains(ctrl.mrpi, s, tol=1e-9)),
                       in_level_set=in_level, delta_hat=delta_hat, cost=stage_cost(s, u))
        if np.any(np.abs(s_next) > setting.x_max):
            trace.extras["violation"] = {"step": i, "state": s_next, "truth_in_W": truth_in}
            if truth_in:
                raise SafetyViolation(f"state {s_next} leaves the box at step {i}")
        rec = TransitionRecord(s, np.atleast_1d(u), s_next)
        data.append(rec)
        batch.append(rec)
        recent.append(s)
        s = s_next
        if len(batch) == cfg.batch:
            J = sum(cfg.gamma ** k * stage_cost(r.s, r.a) for k, r in enumerate(batch))
            td = None
            if not state.pending:
                est = q_batch_update_direction(ctrls.get(theta), batch, cfg.gamma, stage_cost,
                                               solutions=ctrls.get(theta).memo)
                td = est.value
                grad = est.grad
                H_metric = gauss_newton_metric(est.extra["jacobian"], cfg.gn_damping, cfg.gn_marquardt)
                cons = tube_constraints(setting, data, model, tightening=ctrls.get(theta).h[-1])

                def recompute(alpha, theta_p=theta, g=grad, Hm=H_metric):
                    return constrained_step(theta_p, g, UpdateStepConfig(alpha, Hm, cfg.rho, cfg.n_fail), cons)

                try:
                    state = propose(state, recompute, cfg.rho, cfg.tube_alpha)
                except (AlphaUnderflow, PostCheckFailed):
                    pass
            else:
                td = float(np.mean(np.abs(_td(ctrls, theta, batch, cfg.gamma, stage_cost))))
            trace.add_epoch(epoch=epoch, theta=theta, td=td, J=J, delta_hat=delta_hat, alpha=state.alpha,
                            pending=state.pending)
            batch = []
            epoch += 1
    trace.extras["final_theta"] = state.theta_current
    trace.extras["learned_W"] = ctrls.get(state.theta_current).W_verts
    return trace


def _td(ctrls, theta, batch, gamma, stage_cost):
    out = []
    for r in batch:
        q = ctrls.solve(theta, r.s, r.a)
        v = ctrls.solve(theta, r.s_next)
        out.append(stage_cost(r.s, r.a) + gamma * v.value - q.value)
    return np.array(out)


def _hash(theta):
    import hashlib

    return hashlib.sha256(np.ascontiguousarray(theta, dtype=float).tobytes()).hexdigest()[:16]
