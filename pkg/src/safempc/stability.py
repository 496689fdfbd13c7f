"""Lyapunov and ISS telemetry in the joint state-parameter space."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DegenerateSequence(ValueError):
    pass


class NoMonotoneFit(RuntimeError):
    pass


@dataclass
class LyapunovRecord:
    step: int
    epoch: int
    v_hat: float
    delta_p: float
    w_value: float
    in_level_set: bool
    iss_residual: float = 0.0


@dataclass
class RateEstimates:
    r_hat: float
    q_hat: float
    alpha_v_hat: float
    zeta_min: float
    q_floor: float = 0.0

    def as_dict(self):
        return {"r_hat": self.r_hat, "q_hat": self.q_hat, "alpha_v_hat": self.alpha_v_hat,
                "zeta_min": self.zeta_min, "q_floor": self.q_floor}


def w_value(v_hat, theta_p, theta_star, zeta):
    """V(s) + zeta * |theta_p - theta_star|."""
    if not np.isfinite(v_hat):
        raise ValueError("value is not finite at this state")
    d = float(np.linalg.norm(np.asarray(theta_p, dtype=float) - np.asarray(theta_star, dtype=float)))
    return float(v_hat) + zeta * d


def zeta_min(alpha_v, r):
    if not 0.0 <= r < 1.0:
        return np.inf
    return alpha_v * (r + 1.0) / (1.0 - r)


def estimate_rates(thetas, theta_star, value_pairs=(), q_floor=None):
    """Contraction rate r, practical offset q and value sensitivity alpha_V.

    ``value_pairs`` holds tuples ``(V_p(s), V_{p+1}(s), |theta_{p+1} - theta_p|)``.
    r is the largest ratio Delta_{p+1} / Delta_p over epochs with Delta_p above
    ``q_floor`` (default: the largest Delta over the last quarter of the
    sequence, i.e. the size of the neighbourhood the parameters settle in).
    q is then the smallest offset with Delta_{p+1} <= r Delta_p + q everywhere.
    """
    th = np.atleast_2d(np.asarray(thetas, dtype=float))
    if th.shape[0] < 3:
        raise DegenerateSequence("need at least three parameter vectors")
    d = np.linalg.norm(th - np.asarray(theta_star, dtype=float), axis=1)
    if q_floor is None:
        q_floor = float(np.max(d[-max(1, len(d) // 4):]))
    mask = d[:-1] > max(q_floor, 1e-300)
    if not np.any(mask):
        raise DegenerateSequence("all parameter distances are below the floor")
    ratios = d[1:][mask] / d[:-1][mask]
    r = float(np.max(ratios))
    q = float(max(0.0, np.max(d[1:] - min(r, 1.0) * d[:-1])))
    alpha_v = 0.0
    for v0, v1, step in value_pairs:
        if step > 0 and np.isfinite(v0) and np.isfinite(v1):
            alpha_v = max(alpha_v, abs(v1 - v0) / step)
    return RateEstimates(r, q, alpha_v, zeta_min(alpha_v, r), q_floor)


@dataclass
class DecreaseReport:
    checked: int
    violations: list = field(default_factory=list)
    level_exits: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.violations


def check_w_decrease(records, tol=1e-9):
    """Flag steps outside the level set where W did not decrease.

    Steps inside the level set are checked for staying inside instead; those
    exits are listed separately.
    """
    rep = DecreaseReport(0)
    for a, b in zip(records[:-1], records[1:]):
        if b.step != a.step + 1:
            continue
        if a.in_level_set:
            if not b.in_level_set and b.epoch == a.epoch:
                rep.level_exits.append(a.step)
            continue
        rep.checked += 1
        if b.w_value > a.w_value + tol * max(1.0, abs(a.w_value)):
            rep.violations.append(a.step)
    return rep


def check_v_decrease(records, tol=1e-9, within_epoch=True):
    """V decrease outside the level set, optionally only between steps of one epoch."""
    rep = DecreaseReport(0)
    for a, b in zip(records[:-1], records[1:]):
        if b.step != a.step + 1 or (within_epoch and a.epoch != b.epoch):
            continue
        if a.in_level_set:
            if not b.in_level_set:
                rep.level_exits.append(a.step)
            continue
        rep.checked += 1
        if b.v_hat > a.v_hat + tol * max(1.0, abs(a.v_hat)):
            rep.violations.append(a.step)
    return rep


@dataclass
class IssFit:
    knots: np.ndarray
    values: np.ndarray
    margin: float
    residuals: np.ndarray

    def beta(self, x):
        return np.interp(x, self.knots, self.values)


def check_iss(v_now, v_next, delta_p, gamma, delta_hat):
    """Fit a monotone piecewise-linear beta with beta(0) = 0 such that

        V_next - V_now <= -(1 - gamma) V_now + delta_hat + beta(Delta_p)

    holds on every record. The fit is the running-max envelope of the required
    values over sorted Delta. The margin is the smallest slack left by the fit
    (non-negative by construction when a fit exists).
    """
    v_now = np.asarray(v_now, dtype=float)
    v_next = np.asarray(v_next, dtype=float)
    dp = np.asarray(delta_p, dtype=float)
    need = v_next - v_now + (1.0 - gamma) * v_now - delta_hat
    zero = dp <= 0.0
    if np.any(need[zero] > 1e-9 * np.maximum(1.0, np.abs(v_now[zero]))):
        raise NoMonotoneFit("decrease fails at a record with Delta_p = 0, where beta must vanish")
    pos = ~zero
    if not np.any(pos):
        return IssFit(np.array([0.0]), np.array([0.0]), float(np.min(-need, initial=np.inf)), -need)
    order = np.argsort(dp[pos], kind="stable")
    xs = dp[pos][order]
    req = np.maximum(need[pos][order], 0.0)
    env = np.maximum.accumulate(req)
    # a step at each knot, so beta(x) >= env on [x_k, x_{k+1}); with linear interpolation
    # we place the value at the left end of every interval and keep monotonicity
    knots = np.concatenate([[0.0], xs])
    values = np.concatenate([[0.0], env])
    # linear interpolation between (0, 0) and (x_1, env_1) undershoots nothing at the knots;
    # between knots the envelope is non-decreasing so the interpolant stays above env at knots.
    fit_vals = np.interp(dp, knots, values)
    slack = fit_vals - need
    return IssFit(knots, values, float(np.min(slack)), slack)
