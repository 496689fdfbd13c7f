"""Tube-based robust MPC with learnable cost, reference and disturbance set.

The nominal trajectory starts at the measured state. Stage constraints are
tightened by the k-step reachable error set of the LQR-stabilized tube, and
the terminal set is the maximal RPI set of the LQR closed loop inside the
stage-N tightened constraints.

Parameter vector layout (20 entries)::

    Lambda (sym, 3) | lambda (2) | l (1) | H diag (3) | x_r (2) | u_r (1) | M (4x2, row-major)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from safempc.geometry import EmptySet, GeometryError, Polytope, max_rpi, min_rpi, is_empty
from safempc.model import LinearModel, NoiseModel
from safempc.solvers import NotConverged, NotStabilizable, QpProblem, SolverError, Status, dare, dare_tangent, solve_qp

INFEASIBLE_VALUE = np.finfo(float).max


class TubeError(RuntimeError):
    pass


class TerminalEmpty(TubeError):
    pass


class RiccatiFailure(TubeError):
    pass


class InfeasibleState(TubeError):
    pass


@dataclass(frozen=True)
class TubeSetting:
    A: np.ndarray = field(default_factory=lambda: np.array([[1.0, 0.1], [0.0, 1.0]]))
    B: np.ndarray = field(default_factory=lambda: np.array([[0.05], [0.1]]))
    b: np.ndarray = field(default_factory=lambda: np.zeros(2))
    x_max: float = 1.0
    u_max: float = 10.0
    horizon: int = 50
    n_facets: int = 4
    m: np.ndarray = field(default_factory=lambda: np.ones(4))
    h_min: float = 1e-4
    mrpi_eps: float = 1e-3
    terminal_margin: float = 0.02

    @cached_property
    def model(self):
        return LinearModel(self.A, self.B, self.b)

    @cached_property
    def C(self):
        nx = self.A.shape[0]
        nu = self.B.shape[1]
        return np.vstack([np.eye(nx), -np.eye(nx), np.zeros((2 * nu, nx))])

    @cached_property
    def D(self):
        nx = self.A.shape[0]
        nu = self.B.shape[1]
        return np.vstack([np.zeros((2 * nx, nu)), np.eye(nu), -np.eye(nu)])

    @cached_property
    def c_hat(self):
        nx = self.A.shape[0]
        nu = self.B.shape[1]
        return -np.concatenate([self.x_max * np.ones(2 * nx), self.u_max * np.ones(2 * nu)])

    @cached_property
    def state_box(self):
        nx = self.A.shape[0]
        return Polytope.box(-self.x_max * np.ones(nx), self.x_max * np.ones(nx))

    @cached_property
    def prediction(self):
        """Stacked x_k = Phi_k s + Gamma_k U + beta_k for k = 0..N."""
        A, B, b = self.A, self.B, self.b
        nx, nu, N = A.shape[0], B.shape[1], self.horizon
        Phi = np.zeros((N + 1, nx, nx))
        Gam = np.zeros((N + 1, nx, N * nu))
        beta = np.zeros((N + 1, nx))
        Phi[0] = np.eye(nx)
        for k in range(N):
            Phi[k + 1] = A @ Phi[k]
            Gam[k + 1] = A @ Gam[k]
            Gam[k + 1][:, k * nu:(k + 1) * nu] = B
            beta[k + 1] = A @ beta[k] + b
        for arr in (Phi, Gam, beta):
            arr.flags.writeable = False
        return Phi, Gam, beta


N_THETA = 20
LAYOUT = {
    "Lambda": slice(0, 3),
    "lambda": slice(3, 5),
    "l": slice(5, 6),
    "H": slice(6, 9),
    "x_r": slice(9, 11),
    "u_r": slice(11, 12),
    "M": slice(12, 20),
}
THETA_NAMES = ["Lam11", "Lam12", "Lam22", "lam1", "lam2", "l", "H_p", "H_v", "H_u", "xr_p", "xr_v", "u_r"] + [
    f"M{i}{j}" for i in range(4) for j in range(2)
]


@dataclass(frozen=True)
class TubeMpcParameters:
    Lambda: np.ndarray
    lam: np.ndarray
    l: float
    H_diag: np.ndarray
    x_r: np.ndarray
    u_r: np.ndarray
    M: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "Lambda", np.asarray(self.Lambda, dtype=float).reshape(2, 2))
        object.__setattr__(self, "lam", np.asarray(self.lam, dtype=float).ravel())
        object.__setattr__(self, "l", float(self.l))
        object.__setattr__(self, "H_diag", np.asarray(self.H_diag, dtype=float).ravel())
        object.__setattr__(self, "x_r", np.asarray(self.x_r, dtype=float).ravel())
        object.__setattr__(self, "u_r", np.atleast_1d(np.asarray(self.u_r, dtype=float)).ravel())
        object.__setattr__(self, "M", np.asarray(self.M, dtype=float).reshape(-1, 2))

    def vector(self):
        L = self.Lambda
        return np.concatenate([[L[0, 0], L[0, 1], L[1, 1]], self.lam, [self.l], self.H_diag, self.x_r, self.u_r,
                               self.M.ravel()])

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v)
        L = np.array([[v[0], v[1]], [v[1], v[2]]])
        return cls(L, v[3:5], v[5], v[6:9], v[9:11], v[11:12], v[12:20].reshape(4, 2))

    def noise(self, setting):
        return NoiseModel(self.M, setting.m)

    def digest(self):
        import hashlib

        return hashlib.sha256(np.ascontiguousarray(self.vector()).tobytes()).hexdigest()[:16]


def _unpack(theta):
    """Complex-friendly split of the parameter vector."""
    Lam = np.array([[theta[0], theta[1]], [theta[1], theta[2]]])
    return Lam, theta[3:5], theta[5], theta[6:9], theta[9:11], theta[11:12], theta[12:20].reshape(4, 2)


@dataclass
class MpcSolution:
    nominal_states: np.ndarray
    nominal_inputs: np.ndarray
    value: float
    feasible: bool
    active_set: list = field(default_factory=list)
    multipliers: dict = field(default_factory=dict)

    @property
    def action(self):
        return self.nominal_inputs[0]


class TubeController:
    """All quantities derived from one parameter vector, plus the QP-based evaluations."""

    def __init__(self, params: TubeMpcParameters, setting: TubeSetting = None):
        self.setting = setting or TubeSetting()
        self.params = params
        self.theta = params.vector()
        st = self.setting
        H = params.H_diag
        if np.any(H <= 0):
            raise RiccatiFailure("stage weights must be positive")
        nx = st.A.shape[0]
        self.Qx = np.diag(H[:nx])
        self.Ru = np.diag(H[nx:])
        try:
            self.P, self.K = dare(st.A, st.B, self.Qx, self.Ru)
        except (NotStabilizable, NotConverged) as exc:
            raise RiccatiFailure(str(exc)) from exc
        self.A_K = st.A - st.B @ self.K
        noise = params.noise(st)
        self.W = noise.polytope()
        try:
            self.W_verts = self.W.vertex_cloud()
        except GeometryError as exc:
            raise TerminalEmpty(f"noise set invalid: {exc}") from exc
        self.W_pairs = _vertex_facets(self.W, self.W_verts)
        self._tighten()
        self._terminal()
        self._cost_matrices()

    # derived ingredients

    def _tighten(self):
        st = self.setting
        N = st.horizon
        self.CK = st.C - st.D @ self.K
        R = self.CK.copy()
        h = np.zeros((N + 1, R.shape[0]))
        arg = np.zeros((N, R.shape[0]), dtype=int)
        for k in range(N):
            vals = R @ self.W_verts.T
            arg[k] = np.argmax(vals, axis=1)
            h[k + 1] = h[k] + vals[np.arange(R.shape[0]), arg[k]]
            R = R @ self.A_K
        self.h = h
        self.h_arg = arg
        self.c_tight = st.c_hat[None, :] + h

    def _terminal(self):
        st = self.setting
        N = st.horizon
        offs = -st.c_hat - self.h[N] - st.C @ self.params.x_r - st.D @ self.params.u_r
        Z = Polytope(self.CK, offs)
        AN = np.linalg.matrix_power(self.A_K, N)
        WN = Polytope.from_vertices(self.W_verts @ AN.T)
        try:
            if is_empty(Z):
                raise EmptySet("tightened constraints are empty")
            Om, prov = max_rpi(self.A_K, Z, WN, return_provenance=True)
        except (EmptySet, NotConverged, GeometryError) as exc:
            raise TerminalEmpty(str(exc)) from exc
        self.terminal_dev = Om
        self.terminal_prov = prov
        self.AN = AN
        self.G = Om.normals
        self.g = -Om.normals @ self.params.x_r - Om.offsets
        # frozen argmax vertices of the terminal disturbance set, per (row, power)
        self.terminal_arg = {}
        VN = self.W_verts @ AN.T
        for (i, k) in prov:
            Rj = self.CK[i].copy()
            args = []
            for _ in range(k):
                args.append(int(np.argmax(VN @ Rj)))
                Rj = Rj @ self.A_K
            self.terminal_arg[(i, k)] = args

    @property
    def terminal_set(self) -> Polytope:
        return self.terminal_dev.translate(self.params.x_r)

    @cached_property
    def mrpi(self) -> Polytope:
        """Outer approximation of the minimal RPI set of the LQR loop, centered at x_r."""
        return min_rpi(self.A_K, self.W, eps=self.setting.mrpi_eps).translate(self.params.x_r)

    @cached_property
    def mrpi_dev(self) -> Polytope:
        return min_rpi(self.A_K, self.W, eps=self.setting.mrpi_eps)

    @cached_property
    def max_invariant(self) -> Polytope:
        """MRPI set of the LQR loop inside the raw constraints, centered at x_r."""
        st = self.setting
        offs = -st.c_hat - st.C @ self.params.x_r - st.D @ self.params.u_r
        return max_rpi(self.A_K, Polytope(self.CK, offs), self.W).translate(self.params.x_r)

    def _cost_matrices(self):
        st = self.setting
        Phi, Gam, beta = st.prediction
        N = st.horizon
        nu = st.B.shape[1]
        Qs = [self.Qx] * N + [self.P]
        Hq = np.zeros((N * nu, N * nu))
        for k in range(1, N + 1):
            Hq += Gam[k].T @ Qs[k] @ Gam[k]
        Hq += np.kron(np.eye(N), self.Ru)
        self.Hqp = 2.0 * 0.5 * (Hq + Hq.T)
        self._Qs = Qs
        # constraint rows on U
        C, D = st.C, st.D
        rows = []
        for k in range(N):
            Dk = np.zeros((D.shape[0], N * nu))
            Dk[:, k * nu:(k + 1) * nu] = D
            rows.append(C @ Gam[k] + Dk)
        self.A_stage = np.array(rows)
        self.A_term = self.G @ Gam[N]
        nz = np.abs(self.A_stage).max(axis=2) > 0
        self.stage_mask = nz

    # QP evaluation

    def _qp(self, s, a=None):
        st = self.setting
        Phi, Gam, beta = st.prediction
        N = st.horizon
        nu = st.B.shape[1]
        p = self.params
        s = np.asarray(s, dtype=float).ravel()
        free = np.array([Phi[k] @ s + beta[k] for k in range(N + 1)])
        g = np.zeros(N * nu)
        for k in range(1, N + 1):
            g += 2.0 * Gam[k].T @ self._Qs[k] @ (free[k] - p.x_r)
        g -= 2.0 * np.kron(np.ones(N), self.Ru @ p.u_r)
        rows = []
        rhs = []
        index = []
        pre_ok = True
        for k in range(N):
            b_k = -self.c_tight[k] - st.C @ free[k]
            for i in range(b_k.size):
                if self.stage_mask[k, i]:
                    rows.append(self.A_stage[k, i])
                    rhs.append(b_k[i])
                    index.append(("stage", k, i))
                elif b_k[i] < -1e-9:
                    pre_ok = False
        b_t = -self.g - self.G @ free[N]
        for j in range(b_t.size):
            rows.append(self.A_term[j])
            rhs.append(b_t[j])
            index.append(("term", N, j))
        E = e = None
        if a is not None:
            E = np.zeros((nu, N * nu))
            E[:, :nu] = np.eye(nu)
            e = np.atleast_1d(np.asarray(a, dtype=float))
        prob = QpProblem(self.Hqp, g, E, e, np.array(rows), np.array(rhs))
        return prob, free, index, pre_ok

    def _constant(self, s, free):
        p = self.params
        N = self.setting.horizon
        c = 0.0
        for k in range(N + 1):
            d = free[k] - p.x_r
            c += d @ self._Qs[k] @ d
        c += N * (p.u_r @ self.Ru @ p.u_r)
        return c + s @ p.Lambda @ s + p.lam @ s + p.l

    def solve(self, s, a=None) -> MpcSolution:
        st = self.setting
        N = st.horizon
        nu = st.B.shape[1]
        s = np.asarray(s, dtype=float).ravel()
        prob, free, index, pre_ok = self._qp(s, a)
        Phi, Gam, beta = st.prediction
        if not pre_ok:
            return _infeasible(N, s.size, nu)
        try:
            sol = solve_qp(prob)
        except SolverError as exc:
            raise TubeError(f"MPC QP failed: {exc}") from exc
        if sol.status is not Status.OPTIMAL:
            return _infeasible(N, s.size, nu)
        U = sol.primal
        X = np.array([free[k] + Gam[k] @ U for k in range(N + 1)])
        value = sol.value + self._constant(s, free)
        mu_stage = np.zeros((N, self.setting.C.shape[0]))
        mu_term = np.zeros(self.G.shape[0])
        for r, tag in enumerate(index):
            if tag[0] == "stage":
                mu_stage[tag[1], tag[2]] = sol.dual_in[r]
            else:
                mu_term[tag[2]] = sol.dual_in[r]
        active = [index[r] for r in sol.active_set]
        mult = {"stage": mu_stage, "terminal": mu_term, "eq": sol.dual_eq}
        return MpcSolution(X, U.reshape(N, nu), float(value), True, active, mult)

    def value(self, s) -> float:
        sol = self.solve(s)
        return sol.value if sol.feasible else np.inf

    def action_value(self, s, a) -> float:
        sol = self.solve(s, a)
        return sol.value if sol.feasible else np.inf

    def policy(self, s):
        sol = self.solve(s)
        if not sol.feasible:
            raise InfeasibleState(f"MPC infeasible at {s}")
        return sol.action

    def is_feasible(self, s) -> bool:
        return self.solve(s).feasible

    def is_feasible_with_action(self, s, a) -> bool:
        return self.solve(s, a).feasible

    def level_set_membership(self, s, delta, gamma) -> bool:
        return self.value(s) <= delta / (1.0 - gamma)

    # sensitivities

    def value_gradient(self, s, sol: MpcSolution, h=1e-30):
        """Envelope-theorem gradient of the optimal value with respect to theta.

        The Lagrangian is differentiated at the fixed primal-dual point with the
        constraint data evaluated on a frozen structure (argmax vertices of the
        disturbance set and terminal-row provenance), by complex steps.
        """
        if not sol.feasible:
            raise InfeasibleState("gradient requested at an infeasible state")
        st = self.setting
        s = np.asarray(s, dtype=float).ravel()
        grad = np.zeros(N_THETA)
        dP, dK = self._riccati_tangents()
        for j in range(N_THETA):
            th = self.theta.astype(complex)
            th[j] += 1j * h
            P_c = self.P + 1j * h * dP[j]
            K_c = self.K + 1j * h * dK[j]
            grad[j] = self._lagrangian(th, P_c, K_c, s, sol).imag / h
        return grad

    def _riccati_tangents(self):
        if not hasattr(self, "_rt"):
            st = self.setting
            nx = st.A.shape[0]
            dP = np.zeros((N_THETA, nx, nx))
            dK = np.zeros((N_THETA,) + self.K.shape)
            for t, j in enumerate(range(LAYOUT["H"].start, LAYOUT["H"].stop)):
                dQ = np.zeros((nx, nx))
                dR = np.zeros_like(self.Ru)
                if t < nx:
                    dQ[t, t] = 1.0
                else:
                    dR[t - nx, t - nx] = 1.0
                dP[j], dK[j] = dare_tangent(st.A, st.B, self.Ru, self.P, self.K, dQ, dR)
            self._rt = (dP, dK)
        return self._rt

    def _lagrangian(self, th, P_c, K_c, s, sol):
        st = self.setting
        N = st.horizon
        Lam, lam, l, Hd, x_r, u_r, M = _unpack(th)
        nx = st.A.shape[0]
        Qx = np.diag(Hd[:nx])
        Ru = np.diag(Hd[nx:])
        X, U = sol.nominal_states, sol.nominal_inputs
        L = s @ Lam @ s + lam @ s + l
        dX = X - x_r
        dU = U - u_r
        L = L + np.einsum("ki,ij,kj->", dX[:N], Qx, dX[:N]) + np.einsum("ki,ij,kj->", dU, Ru, dU)
        L = L + dX[N] @ P_c @ dX[N]
        m = st.m
        verts = _frozen_vertices(M, m, self.W_pairs)
        A_K = st.A - st.B @ K_c
        CK = st.C - st.D @ K_c
        mu = sol.multipliers["stage"]
        # stage tightening: h_k,i = sum_{j<k} CK_i A_K^j v_{arg(j,i)}
        ks, rs = np.nonzero(np.abs(mu) > 0)
        if ks.size:
            pw = [np.eye(nx, dtype=complex)]
            for _ in range(N):
                pw.append(pw[-1] @ A_K)
            for k, i in zip(ks, rs):
                hk = 0.0
                for j in range(k):
                    hk = hk + CK[i] @ pw[j] @ verts[self.h_arg[j, i]]
                L = L + mu[k, i] * hk
        mu_t = sol.multipliers["terminal"]
        if np.any(mu_t != 0):
            AN = np.linalg.matrix_power(A_K, N)
            VN = verts @ AN.T
            base = -st.c_hat - st.C @ x_r - st.D @ u_r
            hN = np.zeros(CK.shape[0], dtype=complex)
            pw = np.eye(nx, dtype=complex)
            for j in range(N):
                R = CK @ pw
                hN = hN + np.array([R[i] @ verts[self.h_arg[j, i]] for i in range(CK.shape[0])])
                pw = pw @ A_K
            for r, (i, k) in enumerate(self.terminal_prov):
                if mu_t[r] == 0:
                    continue
                row = CK[i] @ np.linalg.matrix_power(A_K, k)
                off = base[i] - hN[i]
                Rj = CK[i]
                for a in self.terminal_arg[(i, k)]:
                    off = off - Rj @ VN[a]
                    Rj = Rj @ A_K
                L = L + mu_t[r] * (row @ (X[N] - x_r) - off)
        return L

    def action_value_gradient(self, s, a):
        sol = self.solve(s, a)
        return self.value_gradient(s, sol)


def _infeasible(N, nx, nu):
    return MpcSolution(np.full((N + 1, nx), np.nan), np.full((N, nu), np.nan), np.inf, False)


def _vertex_facets(W: Polytope, verts):
    """For each vertex, the pair of facet rows whose intersection defines it."""
    pairs = []
    N, b = W.normals, W.offsets
    for v in verts:
        slack = b - N @ v
        tight = np.flatnonzero(np.abs(slack) <= 1e-9 * max(1.0, np.abs(b).max()))
        pair = None
        for x in range(len(tight)):
            for y in range(x + 1, len(tight)):
                M2 = N[[tight[x], tight[y]]]
                if abs(np.linalg.det(M2)) > 1e-12:
                    pair = (int(tight[x]), int(tight[y]))
                    break
            if pair:
                break
        if pair is None:
            raise TerminalEmpty("noise set vertex is not defined by two facets")
        pairs.append(pair)
    return pairs


def _frozen_vertices(M, m, pairs):
    out = []
    for a, b in pairs:
        Mp = M[[a, b]]
        out.append(np.linalg.solve(Mp, m[[a, b]].astype(Mp.dtype)))
    return np.array(out)


def derive(params: TubeMpcParameters, setting: TubeSetting = None) -> TubeController:
    return TubeController(params, setting)


def estimate_delta(ctrl: TubeController, sample_states, gamma, noise_vertices=None):
    """max over samples and disturbance vertices of V(s+) - gamma V(s), floored at 0."""
    st = ctrl.setting
    Wv = ctrl.W_verts if noise_vertices is None else noise_vertices
    delta = 0.0
    worst = None
    for s in sample_states:
        sol = ctrl.solve(s)
        if not sol.feasible:
            continue
        nxt = st.model.predict(s, sol.action)
        for w in Wv:
            v = ctrl.value(nxt + w)
            if not np.isfinite(v):
                continue
            d = v - gamma * sol.value
            if d > delta:
                delta, worst = d, (np.asarray(s), w)
    return delta
