"""Dense LP/QP solving and discrete Riccati iteration.

Every optimization in the package goes through :func:`solve_qp`, a primal
active-set method for convex quadratic programs

    minimize    0.5 x' H x + g' x
    subject to  E x  = e
                A x <= b

A phase-1 LP (itself solved by the same active-set core with a zero Hessian)
produces a feasible starting point when the natural starting point is not
feasible.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from safempc import kernels

FEAS_TOL = 1e-8
OPT_TOL = 1e-8
_ZERO_STEP = 1e-14


class SolverError(RuntimeError):
    pass


class MaxIterations(SolverError):
    pass


class IllConditioned(SolverError):
    pass


class NonConvex(SolverError):
    pass


class NotConverged(SolverError):
    pass


class NotStabilizable(SolverError):
    pass


class Status(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"


def _as_matrix(M, n):
    if M is None:
        return np.zeros((0, n))
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        M = M.reshape(-1, n) if M.size else np.zeros((0, n))
    return M


def _as_vector(v):
    if v is None:
        return np.zeros(0)
    return np.atleast_1d(np.asarray(v, dtype=float)).ravel()


@dataclass
class QpProblem:
    hessian: np.ndarray
    gradient: np.ndarray
    eq_matrix: np.ndarray = None
    eq_rhs: np.ndarray = None
    in_matrix: np.ndarray = None
    in_rhs: np.ndarray = None

    def __post_init__(self):
        self.gradient = _as_vector(self.gradient)
        n = self.gradient.size
        H = np.zeros((n, n)) if self.hessian is None else np.asarray(self.hessian, dtype=float)
        self.hessian = np.atleast_2d(H)
        self.eq_matrix = _as_matrix(self.eq_matrix, n)
        self.eq_rhs = _as_vector(self.eq_rhs)
        self.in_matrix = _as_matrix(self.in_matrix, n)
        self.in_rhs = _as_vector(self.in_rhs)
        if self.hessian.shape != (n, n):
            raise ValueError(f"hessian must be {n}x{n}, got {self.hessian.shape}")
        if self.eq_matrix.shape[0] != self.eq_rhs.size:
            raise ValueError("eq_matrix rows and eq_rhs length differ")
        if self.in_matrix.shape[0] != self.in_rhs.size:
            raise ValueError("in_matrix rows and in_rhs length differ")
        asym = np.max(np.abs(self.hessian - self.hessian.T), initial=0.0)
        if asym > 1e-12 * max(1.0, np.max(np.abs(self.hessian), initial=0.0)):
            raise ValueError("hessian is not symmetric")

    @property
    def n(self) -> int:
        return self.gradient.size

    def objective(self, x) -> float:
        return float(0.5 * x @ self.hessian @ x + self.gradient @ x)


@dataclass
class QpSolution:
    primal: np.ndarray
    dual_eq: np.ndarray
    dual_in: np.ndarray
    active_set: list = field(default_factory=list)
    value: float = np.inf
    status: Status = Status.OPTIMAL
    iterations: int = 0

    @property
    def optimal(self) -> bool:
        return self.status is Status.OPTIMAL


def kkt_residuals(p: QpProblem, sol: QpSolution) -> dict:
    """Stationarity, primal feasibility, dual sign and complementarity residuals."""
    x = sol.primal
    grad = p.hessian @ x + p.gradient
    stat = grad + p.eq_matrix.T @ sol.dual_eq + p.in_matrix.T @ sol.dual_in
    slack = p.in_matrix @ x - p.in_rhs
    eq = p.eq_matrix @ x - p.eq_rhs
    return {
        "stationarity": float(np.max(np.abs(stat), initial=0.0)),
        "primal": float(max(np.max(slack, initial=0.0), np.max(np.abs(eq), initial=0.0))),
        "dual": float(-min(np.min(sol.dual_in, initial=0.0), 0.0)),
        "complementarity": float(np.max(np.abs(sol.dual_in * slack), initial=0.0)),
    }


def _null_space(AW: np.ndarray, n: int):
    """Orthonormal null-space basis of the working-set matrix (rows assumed independent)."""
    r = AW.shape[0]
    if r == 0:
        return np.eye(n)
    Q, R = np.linalg.qr(AW.T, mode="complete")
    diag = np.abs(np.diag(R[:r, :r]))
    if diag.size and diag.min() < 1e-11 * max(1.0, diag.max()):
        raise IllConditioned("working-set constraints are numerically dependent")
    return Q[:, r:]


def _active_set_core(H, g, E, e, A, b, x, working, max_iter, allow_unbounded=True):
    """Primal active-set iterations from a feasible ``x``.

    Returns (status, x, working, dual_eq, dual_in_working, iterations).
    """
    n = x.size
    working = list(working)
    in_work = np.zeros(A.shape[0], dtype=bool)
    in_work[working] = True
    degenerate_steps = 0
    bland = False
    scale = max(1.0, np.max(np.abs(H), initial=0.0))
    for it in range(1, max_iter + 1):
        grad = H @ x + g
        AW = np.vstack([E, A[working]]) if working else E
        Z = _null_space(AW, n)
        p = np.zeros(n)
        ray = False
        if Z.shape[1]:
            Hz = Z.T @ H @ Z
            gz = Z.T @ grad
            evals, evecs = np.linalg.eigh(Hz)
            if evals[0] < -1e-9 * scale:
                raise NonConvex(f"reduced Hessian has negative eigenvalue {evals[0]:.3e}")
            flat = evals <= 1e-12 * scale
            coeff = evecs.T @ gz
            flat_part = np.where(flat, coeff, 0.0)
            if np.linalg.norm(flat_part) > OPT_TOL * max(1.0, np.linalg.norm(grad)) * 1e-3:
                # zero-curvature descent direction: move until something blocks
                p = -Z @ (evecs @ flat_part)
                ray = True
            else:
                curv = np.where(flat, 0.0, coeff / np.where(flat, 1.0, evals))
                p = -Z @ (evecs @ curv)
        step_norm = np.linalg.norm(p)
        if step_norm <= _ZERO_STEP * max(1.0, np.linalg.norm(x)) * 1e2 and not ray:
            # stationary on the working set: check multiplier signs
            if AW.shape[0]:
                lam, *_ = np.linalg.lstsq(AW.T, -grad, rcond=None)
            else:
                lam = np.zeros(0)
            nu = lam[: E.shape[0]]
            mu = lam[E.shape[0]:]
            if mu.size == 0 or mu.min() >= -OPT_TOL:
                return Status.OPTIMAL, x, working, nu, mu, it
            negative = np.flatnonzero(mu < -OPT_TOL)
            if bland:
                drop_pos = min(negative, key=lambda k: working[k])
            else:
                drop_pos = int(np.argmin(mu))
            in_work[working[drop_pos]] = False
            del working[drop_pos]
            continue
        Ap = A @ p
        slack = b - A @ x
        step, block = kernels.ratio_test(Ap, slack, in_work, 1e-12 * max(1.0, step_norm))
        if ray:
            if block < 0:
                if allow_unbounded:
                    return Status.UNBOUNDED, x, working, np.zeros(E.shape[0]), np.zeros(len(working)), it
                raise SolverError("unbounded direction in a bounded problem")
        elif block >= 0 and step >= 1.0:
            step, block = 1.0, -1
        elif block < 0:
            step = 1.0
        x = x + step * p
        if step * step_norm <= _ZERO_STEP:
            degenerate_steps += 1
            if degenerate_steps > 2 * n + 5:
                bland = True
        else:
            degenerate_steps = 0
        if block >= 0:
            working.append(block)
            in_work[block] = True
    raise MaxIterations(f"active-set method did not converge in {max_iter} iterations")


def _independent_equalities(E, e):
    if E.shape[0] == 0:
        return E, e
    Q, R, piv = _qr_pivot(E.T)
    d = np.abs(np.diag(R))
    rank = int(np.sum(d > 1e-10 * max(1.0, d.max(initial=0.0))))
    keep = np.sort(piv[:rank])
    return E[keep], e[keep]


def _qr_pivot(M):
    from scipy.linalg import qr

    return qr(M, mode="economic", pivoting=True)


def solve_qp(p: QpProblem, max_iter: int | None = None, working_set=None) -> QpSolution:
    """Solve a convex QP by the primal active-set method.

    ``working_set`` optionally fixes the inequality rows treated as equalities
    (used to re-solve on a known active set); the returned point is then the
    minimizer on that face, without sign checks on its multipliers.
    """
    n = p.n
    H, g = p.hessian, p.gradient
    A, b = p.in_matrix, p.in_rhs
    E_full, e_full = p.eq_matrix, p.eq_rhs
    E, e = _independent_equalities(E_full, e_full)
    if max_iter is None:
        max_iter = 50 * (n + A.shape[0]) + 100
    mi = A.shape[0]

    if working_set is not None:
        rows = list(working_set)
        K = np.vstack([E, A[rows]]) if rows else E
        rhs = np.concatenate([e, b[rows]])
        m = K.shape[0]
        kkt = np.block([[H, K.T], [K, np.zeros((m, m))]])
        sol = np.linalg.lstsq(kkt, np.concatenate([-g, rhs]), rcond=None)[0]
        x = sol[:n]
        lam = sol[n:]
        dual_in = np.zeros(mi)
        dual_in[rows] = lam[E.shape[0]:]
        return QpSolution(x, _expand_eq(E_full, E, lam[: E.shape[0]], e_full), dual_in, sorted(rows),
                          p.objective(x), Status.OPTIMAL, 1)

    # starting point: equality-constrained minimizer when well defined, else least norm
    x0 = _initial_point(H, g, E, e)
    if E.shape[0] and np.max(np.abs(E @ x0 - e)) > 1e-7 * max(1.0, np.max(np.abs(e), initial=0.0)):
        return _infeasible(n, E_full.shape[0], mi)
    viol = np.max(A @ x0 - b, initial=-np.inf)
    if viol > FEAS_TOL:
        x0, ok = _phase_one(A, b, E, e, x0, viol, max_iter)
        if not ok:
            return _infeasible(n, E_full.shape[0], mi)
    status, x, working, nu, mu, iters = _active_set_core(H, g, E, e, A, b, x0, [], max_iter)
    if status is Status.UNBOUNDED:
        return QpSolution(x, np.zeros(E_full.shape[0]), np.zeros(mi), [], -np.inf, Status.UNBOUNDED, iters)
    dual_in = np.zeros(mi)
    dual_in[working] = np.maximum(mu, 0.0)
    return QpSolution(x, _expand_eq(E_full, E, nu, e_full), dual_in, sorted(working),
                      p.objective(x), Status.OPTIMAL, iters)


def _expand_eq(E_full, E, nu, e_full):
    if E_full.shape[0] == E.shape[0]:
        return nu
    # dependent equality rows were dropped; map multipliers back by row identity
    out = np.zeros(E_full.shape[0])
    used = np.zeros(E_full.shape[0], dtype=bool)
    for k, row in enumerate(E):
        for j in range(E_full.shape[0]):
            if not used[j] and np.array_equal(E_full[j], row):
                out[j] = nu[k]
                used[j] = True
                break
    return out


def _infeasible(n, me, mi):
    return QpSolution(np.full(n, np.nan), np.zeros(me), np.zeros(mi), [], np.inf, Status.INFEASIBLE, 0)


def _initial_point(H, g, E, e):
    n = g.size
    if E.shape[0]:
        x_part = np.linalg.lstsq(E, e, rcond=None)[0]
        Z = _null_space(E, n) if E.shape[0] < n else np.zeros((n, 0))
    else:
        x_part = np.zeros(n)
        Z = np.eye(n)
    if Z.shape[1] == 0:
        return x_part
    Hz = Z.T @ H @ Z
    evals = np.linalg.eigvalsh(Hz)
    scale = max(1.0, np.max(np.abs(H), initial=0.0))
    if evals[0] > 1e-10 * scale:
        y = np.linalg.solve(Hz, -Z.T @ (H @ x_part + g))
        return x_part + Z @ y
    return x_part


def _phase_one(A, b, E, e, x0, viol, max_iter):
    """Minimize the maximal violation t subject to A x - t <= b, t >= 0."""
    n = x0.size
    Aa = np.hstack([A, -np.ones((A.shape[0], 1))])
    Aa = np.vstack([Aa, np.concatenate([np.zeros(n), [-1.0]])])
    ba = np.concatenate([b, [0.0]])
    Ea = np.hstack([E, np.zeros((E.shape[0], 1))])
    ga = np.zeros(n + 1)
    ga[-1] = 1.0
    z0 = np.concatenate([x0, [viol]])
    status, z, *_ = _active_set_core(np.zeros((n + 1, n + 1)), ga, Ea, e, Aa, ba, z0, [], max_iter,
                                     allow_unbounded=False)
    t = z[-1]
    scale = max(1.0, np.max(np.abs(b), initial=0.0))
    return z[:n], t <= FEAS_TOL * scale


def solve_lp(gradient, in_matrix=None, in_rhs=None, eq_matrix=None, eq_rhs=None, **kwargs) -> QpSolution:
    """Minimize ``gradient' x`` over a polyhedron (zero-Hessian QP)."""
    g = _as_vector(gradient)
    return solve_qp(QpProblem(np.zeros((g.size, g.size)), g, eq_matrix, eq_rhs, in_matrix, in_rhs), **kwargs)


def riccati_map(P, A, B, Q, R):
    S = R + B.T @ P @ B
    return Q + A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(S, B.T @ P @ A)


def dare(A, B, Q, R, tol=1e-12, max_iter=200000):
    """Discrete algebraic Riccati equation by fixed-point iteration.

    Returns ``(P, K)`` with ``K = (R + B'PB)^-1 B'PA`` so that ``u = -K x``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if np.linalg.eigvalsh(0.5 * (R + R.T))[0] <= 0:
        raise ValueError("R must be positive definite")
    P = Q.copy()
    for _ in range(max_iter):
        P_next = riccati_map(P, A, B, Q, R)
        P_next = 0.5 * (P_next + P_next.T)
        if not np.all(np.isfinite(P_next)) or np.max(np.abs(P_next)) > 1e14:
            raise NotStabilizable("Riccati iteration diverged")
        diff = np.max(np.abs(P_next - P))
        P = P_next
        if diff < max(tol, 64 * np.finfo(float).eps * np.max(np.abs(P))):
            break
    else:
        raise NotConverged("Riccati iteration did not converge")
    P = _newton_polish(P, A, B, Q, R)
    K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    if np.max(np.abs(np.linalg.eigvals(A - B @ K))) >= 1.0:
        raise NotStabilizable("closed loop A - BK is not strictly stable")
    return P, K


def _newton_polish(P, A, B, Q, R, steps=3):
    # the map's derivative at P is X -> A_K' X A_K, so a Newton step is one Lyapunov solve
    from scipy.linalg import solve_discrete_lyapunov

    res = riccati_map(P, A, B, Q, R) - P
    best = np.max(np.abs(res))
    for _ in range(steps):
        K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        AK = A - B @ K
        if np.max(np.abs(np.linalg.eigvals(AK))) >= 1.0:
            break
        X = solve_discrete_lyapunov(AK.T, 0.5 * (res + res.T))
        P_new = P + 0.5 * (X + X.T)
        res_new = riccati_map(P_new, A, B, Q, R) - P_new
        r = np.max(np.abs(res_new))
        if not r < best:
            break
        P, res, best = P_new, res_new, r
    return P


def dare_tangent(A, B, R, P, K, dQ, dR):
    """Directional derivative (dP, dK) of the DARE solution for a weight perturbation.

    dP solves the closed-loop Lyapunov equation dP = A_K' dP A_K + dQ + K' dR K
    and dK = S^-1 (B' dP A_K - dR K) with S = R + B'PB.
    """
    from scipy.linalg import solve_discrete_lyapunov

    AK = A - B @ K
    dP = solve_discrete_lyapunov(AK.T, dQ + K.T @ dR @ K)
    dP = 0.5 * (dP + dP.T)
    S = R + B.T @ P @ B
    dK = np.linalg.solve(S, B.T @ dP @ AK - dR @ K)
    return dP, dK
