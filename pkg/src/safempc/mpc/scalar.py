"""Scalar projection MPC.

The controller tracks the affine law ``a_s - K s`` as closely as possible
while keeping ``A s + B u + w_max <= s_max`` and ``u in [-10, 10 - 0.5 K]``.
Its region of attraction is the interval of states from which the closed
loop, under the worst admissible noise, still climbs back to the
constraint boundary instead of diverging through input saturation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from safempc import kernels


class InfeasibleState(ValueError):
    pass


@dataclass(frozen=True)
class ScalarSetting:
    A: float = 1.1
    B: float = 0.1
    s_max: float = 0.1
    noise_bound: float = 0.01
    u_min: float = -10.0
    u_cap: float = 10.0
    u_cap_slope: float = 0.5
    eps: float = 1e-6
    boundary_states: tuple = (0.0, 0.1)

    def u_max(self, K):
        return self.u_cap - self.u_cap_slope * K

    def stage_cost(self, s, a):
        return (s - 40.0) ** 2 + 1e-4 * a * a


@dataclass(frozen=True)
class ScalarMpcParameters:
    K: float
    a_s: float

    def vector(self):
        return np.array([self.K, self.a_s])

    @classmethod
    def from_vector(cls, v):
        return cls(float(v[0]), float(v[1]))


class ScalarMpc:
    def __init__(self, setting: ScalarSetting = ScalarSetting()):
        self.setting = setting

    def input_bounds(self, params, s):
        st = self.setting
        upper = min(st.u_max(params.K), (st.s_max - st.noise_bound - st.A * s) / st.B)
        return st.u_min, upper

    def policy(self, params: ScalarMpcParameters, s: float) -> float:
        lo, hi = self.input_bounds(params, s)
        if hi < lo:
            raise InfeasibleState(f"no admissible input at s = {s}")
        return float(min(max(params.a_s - params.K * s, lo), hi))

    def policy_array(self, params, s):
        """Vectorized policy; states without an admissible input get the lower bound."""
        st = self.setting
        s = np.asarray(s, dtype=float)
        hi = np.minimum(st.u_max(params.K), (st.s_max - st.noise_bound - st.A * s) / st.B)
        u = np.minimum(np.maximum(params.a_s - params.K * s, st.u_min), hi)
        return np.maximum(u, st.u_min)

    def _policy_scalar(self, params, x):
        st = self.setting
        hi = min(st.u_max(params.K), (st.s_max - st.noise_bound - st.A * x) / st.B)
        return max(min(max(params.a_s - params.K * x, st.u_min), hi), st.u_min)

    def worst_case_successors(self, params, s, a=None):
        st = self.setting
        u = self.policy(params, s) if a is None else a
        c = st.A * s + st.B * u
        return c - st.noise_bound, c + st.noise_bound

    def _attracted(self, params, s, steps=4000):
        # worst-case (lowest) rollout; a unit drop below the start means divergence
        st = self.setting
        return bool(kernels.worst_rollout_attracted(float(s), st.A, st.B, params.K, params.a_s, st.u_min,
                                                    st.u_max(params.K), st.s_max, st.noise_bound, steps))

    def region_of_attraction_1d(self, params: ScalarMpcParameters, tol=1e-12):
        """Interval [lower, s_max] of states that are recursively feasible and attracted."""
        st = self.setting
        hi = st.s_max
        if not self._attracted(params, hi):
            return (hi, hi)
        lo = -1.0
        while self._attracted(params, lo):
            lo *= 2.0
            if lo < -1e8:
                return (-np.inf, hi)
        a, b = lo, hi
        while b - a > tol * max(1.0, abs(a)):
            mid = 0.5 * (a + b)
            if self._attracted(params, mid):
                b = mid
            else:
                a = mid
        return (b, hi)

    def roa_lower_gradient(self, params, h=1e-6):
        """Central-difference sensitivity of the lower RoA endpoint in (K, a_s)."""
        g = np.zeros(2)
        v = params.vector()
        for i in range(2):
            e = np.zeros(2)
            e[i] = h
            up = self.region_of_attraction_1d(ScalarMpcParameters.from_vector(v + e))[0]
            dn = self.region_of_attraction_1d(ScalarMpcParameters.from_vector(v - e))[0]
            g[i] = (up - dn) / (2 * h)
        return g

    def is_feasible(self, params, s) -> bool:
        lo, hi = self.region_of_attraction_1d(params)
        return lo <= s <= hi

    def is_feasible_with_action(self, params, s, a) -> bool:
        st = self.setting
        lo, hi = self.input_bounds(params, s)
        if not (lo - 1e-12 <= a <= hi + 1e-12):
            return False
        return all(self.is_feasible(params, x) for x in self.worst_case_successors(params, s, a))

    def boundary_actions(self, params, projected=False):
        st = self.setting
        out = []
        for sb in st.boundary_states:
            a = min(max(-params.K * sb + params.a_s, st.u_min), st.u_max(params.K))
            if projected:
                a = min(a, (st.s_max - st.noise_bound - st.A * sb) / st.B)
            out.append(a)
        return out
