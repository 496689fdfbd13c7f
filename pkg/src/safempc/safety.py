"""Update gating: the feasibility gate, backtracking on the step size, and
post-run checks that updates were never blocked forever."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from safempc import kernels
from safempc.learning import PostCheckFailed


class SafetyViolation(RuntimeError):
    pass


class IncumbentInfeasible(SafetyViolation):
    pass


class AlphaUnderflow(RuntimeError):
    pass


class Outcome(enum.Enum):
    APPLIED = "applied"
    DEFERRED = "deferred"


class Reason(enum.Enum):
    NEW_FEASIBLE_HERE = "new_feasible_here"
    NEW_INFEASIBLE_HERE = "new_infeasible_here"
    POST_CHECK_FAILED = "post_check_failed"
    NO_CANDIDATE = "no_candidate"


class GateMode(enum.Enum):
    BACKTRACKING = "backtracking"
    FEASIBILITY = "feasibility"


@dataclass(frozen=True)
class UpdateDecision:
    outcome: Outcome
    reason: Reason
    alpha_used: float
    fail_count: int

    def as_dict(self):
        return {"outcome": self.outcome.value, "reason": self.reason.value, "alpha": self.alpha_used,
                "fail_count": self.fail_count}


@dataclass(frozen=True)
class GateState:
    theta_current: np.ndarray
    theta_candidate: np.ndarray = None
    alpha: float = 1.0
    fail_count: int = 0
    mode: GateMode = GateMode.BACKTRACKING
    proposal: int = 0

    @property
    def pending(self):
        return self.theta_candidate is not None


def gate(s, state: GateState, evaluate):
    """One gate decision at state ``s``.

    ``evaluate(theta, s)`` returns ``(feasible, action)`` for the controller
    built from ``theta``. The candidate's action is applied (and the candidate
    promoted) only when its controller is feasible at ``s``; otherwise the
    incumbent acts and the failure counter grows.
    """
    ok, u = evaluate(state.theta_current, s)
    if not ok:
        raise IncumbentInfeasible(f"incumbent controller infeasible at {np.asarray(s).tolist()}")
    if not state.pending:
        return u, UpdateDecision(Outcome.APPLIED, Reason.NO_CANDIDATE, state.alpha, state.fail_count), state
    if np.array_equal(state.theta_candidate, state.theta_current):
        new = replace(state, theta_candidate=None, fail_count=0)
        return u, UpdateDecision(Outcome.APPLIED, Reason.NEW_FEASIBLE_HERE, state.alpha, state.fail_count), new
    ok_new, u_new = evaluate(state.theta_candidate, s)
    if ok_new:
        new = replace(state, theta_current=state.theta_candidate, theta_candidate=None, fail_count=0)
        return u_new, UpdateDecision(Outcome.APPLIED, Reason.NEW_FEASIBLE_HERE, state.alpha, state.fail_count), new
    new = replace(state, fail_count=state.fail_count + 1)
    return u, UpdateDecision(Outcome.DEFERRED, Reason.NEW_INFEASIBLE_HERE, state.alpha, new.fail_count), new


def propose(state: GateState, recompute, rho=0.9, alpha=1.0, max_shrink=200):
    """Start a new learning iteration: alpha resets, a candidate is computed.

    ``recompute(alpha)`` returns the candidate or raises PostCheckFailed, in
    which case alpha shrinks by ``rho`` until a candidate passes.
    """
    for _ in range(max_shrink):
        try:
            cand = recompute(alpha)
            return replace(state, theta_candidate=np.asarray(cand, dtype=float), alpha=alpha, fail_count=0,
                           proposal=state.proposal + 1)
        except PostCheckFailed:
            alpha *= rho
            if alpha < 1e-12:
                break
    raise AlphaUnderflow("no candidate passed the post-checks")


def backtrack_shrink(state: GateState, recompute, rho=0.9, n_fail=1, alpha_min=1e-12):
    """Shrink alpha by rho once the candidate was deferred ``n_fail`` times; the counter resets."""
    if state.fail_count < n_fail or not state.pending:
        return state
    alpha = state.alpha * rho
    while True:
        if alpha < alpha_min:
            raise AlphaUnderflow(f"alpha fell below {alpha_min}")
        try:
            cand = recompute(alpha)
            break
        except PostCheckFailed:
            alpha *= rho
    return replace(state, theta_candidate=np.asarray(cand, dtype=float), alpha=alpha, fail_count=0)


@dataclass
class NonblockingReport:
    proposals: int
    applied: int
    unresolved: int
    deferral_durations: list = field(default_factory=list)
    alpha_sequences: list = field(default_factory=list)

    @property
    def all_applied(self):
        return self.unresolved == 0

    def as_dict(self):
        return {"proposals": self.proposals, "applied": self.applied, "unresolved": self.unresolved,
                "deferral_durations": self.deferral_durations}


def empirical_nonblocking_check(decisions, allow_trailing=True) -> NonblockingReport:
    """Deferral statistics from a decision stream.

    ``decisions`` is a sequence of dicts with keys ``proposal``, ``outcome`` and
    ``alpha`` (one per gate call). A proposal still pending when the run ends
    counts as unresolved unless ``allow_trailing`` and it is the last one.
    """
    by_prop = {}
    order = []
    for d in decisions:
        pid = d.get("proposal")
        if pid is None or d.get("reason") == Reason.NO_CANDIDATE.value:
            continue
        if pid not in by_prop:
            by_prop[pid] = []
            order.append(pid)
        by_prop[pid].append(d)
    durations, alphas = [], []
    applied = unresolved = 0
    for k, pid in enumerate(order):
        ds = by_prop[pid]
        n_def = sum(d["outcome"] == Outcome.DEFERRED.value for d in ds)
        alphas.append([d["alpha"] for d in ds])
        if any(d["outcome"] == Outcome.APPLIED.value for d in ds):
            applied += 1
            durations.append(n_def)
        elif not (allow_trailing and k == len(order) - 1):
            unresolved += 1
    return NonblockingReport(len(order), applied, unresolved, durations, alphas)


@dataclass
class OccupationReport:
    frequency: float
    bound: float
    margin: float
    n: int

    @property
    def holds(self):
        return self.frequency <= self.bound + self.margin


def occupation_bound_check(n_traj=10_000, window=1, region=(-0.01, 0.01), a_cl=0.9, noise_half_width=0.1, seed=0):
    """Frequency of trajectories of s+ = a_cl s + w staying in ``region`` over ``window`` steps.

    Noise is uniform, so its density bound is 1 / (2 * half_width). The start
    states are drawn uniformly in the region. The bound compared against is
    mu(region) * density, with a three-sigma binomial margin.
    """
    rng = np.random.default_rng(seed)
    lo, hi = region
    s0 = rng.uniform(lo, hi, n_traj)
    noise = rng.uniform(-noise_half_width, noise_half_width, (n_traj, window))
    stay = kernels.chain_stay(s0, noise, float(a_cl), float(lo), float(hi))
    freq = float(np.mean(stay))
    phi_bar = 1.0 / (2.0 * noise_half_width)
    bound = (hi - lo) * phi_bar
    p = min(bound, 1.0)
    margin = 3.0 * np.sqrt(p * (1.0 - p) / n_traj)
    return OccupationReport(freq, bound, float(margin), n_traj)
