"""The scalar experiment: exact-gradient tuning of a projection MPC under the update gate."""

from __future__ import annotations

import functools

import numpy as np

from safempc.learning import (
    PostCheckFailed,
    ScalarGrid,
    UpdateStepConfig,
    constrained_step,
    exact_grad_scalar,
    scalar_constraints,
    scalar_step_with_feasibility,
)
from safempc.mpc.scalar import ScalarMpc, ScalarMpcParameters, ScalarSetting
from safempc.safety import (
    AlphaUnderflow,
    GateMode,
    GateState,
    Outcome,
    Reason,
    SafetyViolation,
    UpdateDecision,
    backtrack_shrink,
    gate,
    propose,
)

from .config import ExperimentConfig
from .trace import RunTrace
from .truth import SimTruth


def run_scalar_experiment(cfg: ExperimentConfig, theta0=(2.0, 0.0)) -> RunTrace:
    if cfg.which != "scalar":
        raise ValueError("configuration is not for the scalar experiment")
    setting = ScalarSetting(noise_bound=cfg.noise_bound)
    mpc = ScalarMpc(setting)
    truth = SimTruth.scalar(cfg.seed, setting.A, setting.B, cfg.noise_bound)
    cons = scalar_constraints(mpc, cfg.boundary_action)
    trace = RunTrace(header={"experiment": "scalar", "config": cfg.as_dict(), "seed": cfg.seed,
                             "theta0": list(theta0)})
    roa_cache = {}

    def roa(theta):
        key = tuple(theta)
        if key not in roa_cache:
            roa_cache[key] = mpc.region_of_attraction_1d(ScalarMpcParameters.from_vector(theta))
        return roa_cache[key]

    def evaluate(theta, s):
        lo, hi = roa(theta)
        s = float(np.ravel(s)[0])
        if not lo <= s <= hi:
            return False, None
        return True, mpc.policy(ScalarMpcParameters.from_vector(theta), s)

    def grad_at(theta):
        return _cached_grad(tuple(map(float, theta)), cfg.gamma, cfg.noise_bound)

    s = float(cfg.scalar_s0)
    theta = np.asarray(theta0, dtype=float)
    state = GateState(theta, mode=GateMode(cfg.gate))
    base = UpdateStepConfig(cfg.scalar_alpha, None, cfg.rho, cfg.n_fail)
    grad = None
    for i in range(cfg.scalar_steps):
        if cfg.gate == "backtracking":
            if not state.pending:
                grad = grad_at(state.theta_current)
                theta_p = state.theta_current

                def recompute(alpha, theta_p=theta_p, g=grad):
                    return constrained_step(theta_p, g, UpdateStepConfig(alpha, None, cfg.rho, cfg.n_fail), cons)

                try:
                    state = propose(state, recompute, cfg.rho, cfg.scalar_alpha)
                except AlphaUnderflow:
                    pass
            try:
                u, dec, state = gate(np.array([s]), state, evaluate)
            except SafetyViolation:
                trace.extras["aborted_at"] = i
                raise
            if dec.outcome is Outcome.DEFERRED:
                theta_p, g = state.theta_current, grad

                def recompute(alpha, theta_p=theta_p, g=g):
                    return constrained_step(theta_p, g, UpdateStepConfig(alpha, None, cfg.rho, cfg.n_fail), cons)

                try:
                    state = backtrack_shrink(state, recompute, cfg.rho, cfg.n_fail)
                except AlphaUnderflow:
                    state = GateState(state.theta_current, mode=state.mode, proposal=state.proposal)
        else:
            ok, u = evaluate(state.theta_current, s)
            if not ok:
                trace.extras["aborted_at"] = i
                raise SafetyViolation(f"controller infeasible at s = {s}")
            grad = grad_at(state.theta_current)
            try:
                nxt, alpha_used = scalar_step_with_feasibility(state.theta_current, s, grad, base, mpc, cons)
            except PostCheckFailed:
                nxt, alpha_used = state.theta_current, 0.0
            reason = Reason.NEW_FEASIBLE_HERE
            dec = UpdateDecision(Outcome.APPLIED, reason, alpha_used, 0)
        theta_act = np.array(state.theta_current)
        s_next, w = truth.step(np.array([s]), np.array([u]))
        s_next = float(s_next[0])
        lo, hi = roa(theta_act)
        trace.add_step(step=i, state=[s], action=[u], theta=theta_act, theta_hash=_hash(theta_act), feasible=True,
                       noise=w, in_model_noise=bool(abs(w[0]) <= cfg.noise_bound), decision=dec.as_dict(),
                       proposal=state.proposal, roa=[lo, hi], u_max=setting.u_max(theta_act[0]),
                       cost=setting.stage_cost(s, u))
        if cfg.gate == "feasibility":
            state = GateState(np.asarray(nxt, dtype=float), mode=state.mode, proposal=state.proposal + 1)
        if s_next > setting.s_max and abs(w[0]) <= cfg.noise_bound:
            trace.extras["violation"] = {"step": i, "state": s_next}
            raise SafetyViolation(f"state {s_next} exceeds {setting.s_max}")
        s = s_next
    trace.add_epoch(epoch=0, theta=list(state.theta_current), final_state=s)
    trace.extras["final_theta"] = list(map(float, state.theta_current))
    return trace


@functools.lru_cache(maxsize=4096)
def _cached_grad(theta, gamma, noise_bound):
    # the exact gradient depends on theta only, so seeds can share it
    mpc = ScalarMpc(ScalarSetting(noise_bound=noise_bound))
    g = exact_grad_scalar(ScalarMpcParameters.from_vector(theta), mpc, gamma, grid=ScalarGrid()).grad
    g.flags.writeable = False
    return g


def _hash(theta):
    import hashlib

    return hashlib.sha256(np.ascontiguousarray(theta, dtype=float).tobytes()).hexdigest()[:16]
