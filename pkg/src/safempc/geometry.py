"""H-representation polytopes and robust invariant sets.

A :class:`Polytope` is ``{x : normals @ x <= offsets}``. Values are immutable;
vertex lists of low-dimensional polytopes are cached on first use so that
repeated support queries against a fixed disturbance set reduce to a max over
a handful of points.
"""

from __future__ import annotations

import json

import numpy as np

from safempc.solvers import FEAS_TOL, NotConverged, Status, solve_lp

SET_TOL = 1e-9
MRPI_CAP = 500


class GeometryError(ValueError):
    pass


class EmptyPolytope(GeometryError):
    pass


class UnboundedDirection(GeometryError):
    pass


class DimensionTooHigh(GeometryError):
    pass


class EmptySet(GeometryError):
    pass


class Polytope:
    __slots__ = ("normals", "offsets", "_verts", "_bounded", "_empty")

    def __init__(self, normals, offsets):
        offsets = np.atleast_1d(np.asarray(offsets, dtype=float)).ravel()
        normals = np.asarray(normals, dtype=float)
        if normals.ndim == 1:
            normals = normals.reshape(offsets.size, -1)
        if normals.shape[0] != offsets.size:
            raise GeometryError(f"{normals.shape[0]} normals but {offsets.size} offsets")
        normals = normals.copy()
        offsets = offsets.copy()
        normals.flags.writeable = False
        offsets.flags.writeable = False
        self.normals = normals
        self.offsets = offsets
        self._verts = None
        self._bounded = None
        self._empty = None

    @property
    def dim(self) -> int:
        return self.normals.shape[1]

    @property
    def n_facets(self) -> int:
        return self.offsets.size

    def __repr__(self):
        return f"Polytope(dim={self.dim}, facets={self.n_facets})"

    def __and__(self, other):
        return Polytope(np.vstack([self.normals, other.normals]), np.concatenate([self.offsets, other.offsets]))

    @classmethod
    def box(cls, lo, hi):
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        n = lo.size
        return cls(np.vstack([np.eye(n), -np.eye(n)]), np.concatenate([hi, -lo]))

    @classmethod
    def from_vertices(cls, points):
        """Convex hull of a 1-D or 2-D point cloud."""
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1)
        if pts.shape[1] == 1:
            lo, hi = pts.min(), pts.max()
            P = cls([[1.0], [-1.0]], [hi, -lo])
            P._verts = np.array([[lo], [hi]]) if hi > lo else np.array([[lo]])
            P._bounded = True
            P._empty = False
            return P
        if pts.shape[1] != 2:
            raise DimensionTooHigh("vertex hulls are limited to dimension 2")
        hull = _hull_2d(pts)
        P = cls(*_facets_from_hull(hull))
        P._verts = hull
        P._bounded = True
        P._empty = False
        return P

    def to_json(self) -> str:
        return json.dumps({"normals": self.normals.tolist(), "offsets": self.offsets.tolist()})

    @classmethod
    def from_json(cls, text):
        data = json.loads(text) if isinstance(text, str) else text
        normals = data["normals"]
        offsets = data["offsets"]
        if len(offsets) == 0:
            raise GeometryError("polytope needs at least one facet for its dimension")
        return cls(normals, offsets)

    def translate(self, v):
        """The set P + v."""
        v = np.asarray(v, dtype=float).ravel()
        out = Polytope(self.normals, self.offsets + self.normals @ v)
        if self._verts is not None:
            out._verts = self._verts + v
            out._bounded, out._empty = self._bounded, self._empty
        return out

    def scale(self, c):
        """The set c * P for c > 0."""
        if c <= 0:
            raise GeometryError("scale factor must be positive")
        out = Polytope(self.normals, self.offsets * c)
        if self._verts is not None:
            out._verts = self._verts * c
            out._bounded, out._empty = self._bounded, self._empty
        return out

    def linear_image(self, A):
        """The set {A x : x in P} for dimension <= 2, computed from vertices."""
        A = np.atleast_2d(np.asarray(A, dtype=float))
        V = _vertex_cloud(self)
        return Polytope.from_vertices(V @ A.T)

    def vertex_cloud(self):
        """Extreme points (cached); works for degenerate low-dimensional sets too."""
        return _vertex_cloud(self)


def _hull_2d(pts):
    """Monotone-chain hull, counterclockwise, collinear points dropped."""
    # dedupe relative to the coordinate size so tiny sets keep their exact vertices
    mag = max(np.abs(pts).max(), 1e-300)
    _, first = np.unique(np.round(pts / mag, 13), axis=0, return_index=True)
    pts = pts[np.sort(first)]
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]
    if len(pts) <= 2:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    # cross products scale with the spread times the coordinate size
    ext = float(np.ptp(pts, axis=0).max())
    tol = 1e-13 * ext * max(ext, np.abs(pts).max())
    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= tol:
            lower.pop()
        lower.append(p)
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= tol:
            upper.pop()
        upper.append(p)
    hull = np.array(lower[:-1] + upper[:-1])
    if len(hull) < 2:
        hull = pts[[0, -1]]
    return hull


def _facets_from_hull(hull):
    k = len(hull)
    if k == 1:
        p = hull[0]
        return np.vstack([np.eye(2), -np.eye(2)]), np.concatenate([p, -p])
    if k == 2:
        d = hull[1] - hull[0]
        d = d / np.linalg.norm(d)
        nrm = np.array([d[1], -d[0]])
        N = np.array([nrm, -nrm, d, -d])
        return N, np.array([nrm @ hull[0], -nrm @ hull[0], d @ hull[1], -d @ hull[0]])
    N = []
    o = []
    for i in range(k):
        a, b = hull[i], hull[(i + 1) % k]
        e = b - a
        nrm = np.array([e[1], -e[0]]) / np.linalg.norm(e)
        N.append(nrm)
        o.append(nrm @ a)
    return np.array(N), np.array(o)


def _is_bounded(P):
    if P._bounded is None:
        N = P.normals
        if P.dim == 1:
            P._bounded = bool((N[:, 0] > 0).any() and (N[:, 0] < 0).any())
        elif P.dim == 2:
            nz = np.linalg.norm(N, axis=1) > 0
            ang = np.sort(np.arctan2(N[nz, 1], N[nz, 0]))
            if ang.size < 3:
                P._bounded = False
            else:
                gaps = np.diff(np.concatenate([ang, [ang[0] + 2 * np.pi]]))
                P._bounded = bool(gaps.max() < np.pi - 1e-12)
        else:
            bounded = True
            for d in np.vstack([np.eye(P.dim), -np.eye(P.dim)]):
                s = solve_lp(-d, P.normals, P.offsets)
                if s.status is Status.UNBOUNDED:
                    bounded = False
                    break
            P._bounded = bounded
    return P._bounded


def _vertex_cloud(P):
    if P._verts is not None:
        return P._verts
    if P.dim > 2:
        raise DimensionTooHigh("vertex enumeration is limited to dimension 2")
    if not _is_bounded(P):
        raise UnboundedDirection("polytope is unbounded")
    N, b = P.normals, P.offsets
    scale = max(1.0, np.abs(b).max(initial=0.0))
    if P.dim == 1:
        pos = N[:, 0] > 0
        neg = N[:, 0] < 0
        hi = np.min(b[pos] / N[pos, 0])
        lo = np.max(b[neg] / N[neg, 0])
        zero_ok = np.all(b[~(pos | neg)] >= -FEAS_TOL)
        if lo > hi + FEAS_TOL * scale or not zero_ok:
            P._empty = True
            raise EmptyPolytope("polytope is empty")
        P._empty = False
        hi = max(hi, lo)
        P._verts = np.array([[lo], [hi]]) if hi > lo else np.array([[lo]])
        return P._verts
    # all pairwise facet intersections by Cramer's rule
    I, J = np.triu_indices(N.shape[0], 1)
    a, c = N[I], N[J]
    det = a[:, 0] * c[:, 1] - a[:, 1] * c[:, 0]
    big = np.maximum(1.0, np.maximum(np.abs(a).max(axis=1), np.abs(c).max(axis=1)) ** 2)
    ok = np.abs(det) >= 1e-12 * big
    a, c, det, bi, bj = a[ok], c[ok], det[ok], b[I[ok]], b[J[ok]]
    x = np.column_stack([(bi * c[:, 1] - bj * a[:, 1]) / det, (a[:, 0] * bj - c[:, 0] * bi) / det])
    if len(x):
        slack = x @ N.T - b[None, :]
        # absolute tolerance: a relative one lets far intersections of near-parallel facets through
        x = x[np.all(slack <= 1e-9 * scale, axis=1)]
    if not len(x):
        P._empty = True
        raise EmptyPolytope("polytope is empty")
    P._empty = False
    P._verts = _hull_2d(x)
    return P._verts


def support(P: Polytope, d) -> float:
    """max over x in P of d . x."""
    return float(support_vertex(P, d)[0])


def support_vertex(P: Polytope, d):
    """Support value and a maximizing point (lowest-index vertex on ties)."""
    d = np.asarray(d, dtype=float).ravel()
    if P.dim <= 2:
        V = _vertex_cloud(P)
        vals = V @ d
        k = int(np.argmax(vals))
        return vals[k], V[k]
    sol = solve_lp(-d, P.normals, P.offsets)
    if sol.status is Status.INFEASIBLE:
        raise EmptyPolytope("polytope is empty")
    if sol.status is Status.UNBOUNDED:
        raise UnboundedDirection("support is unbounded in this direction")
    return -sol.value, sol.primal


def support_many(P: Polytope, D) -> np.ndarray:
    D = np.atleast_2d(np.asarray(D, dtype=float))
    if P.dim <= 2:
        return (D @ _vertex_cloud(P).T).max(axis=1)
    return np.array([support(P, d) for d in D])


def is_empty(P: Polytope) -> bool:
    if P._empty is None:
        if P.dim <= 2 and _is_bounded(P):
            try:
                _vertex_cloud(P)
            except EmptyPolytope:
                pass
        else:
            sol = solve_lp(np.zeros(P.dim), P.normals, P.offsets)
            P._empty = sol.status is Status.INFEASIBLE
    return bool(P._empty)


def contains(P: Polytope, x, tol=SET_TOL) -> bool:
    x = np.asarray(x, dtype=float).ravel()
    return bool(np.all(P.normals @ x <= P.offsets + tol))


def subset(P: Polytope, Q: Polytope, tol=SET_TOL) -> bool:
    """True iff P is contained in Q (an empty P is contained in anything)."""
    if is_empty(P):
        return True
    h = support_many(P, Q.normals) if P.dim <= 2 else np.array([_support_or_inf(P, n) for n in Q.normals])
    return bool(np.all(h <= Q.offsets + tol * np.maximum(1.0, np.abs(Q.offsets))))


def _support_or_inf(P, d):
    try:
        return support(P, d)
    except UnboundedDirection:
        return np.inf


def pontryagin_diff(P: Polytope, W: Polytope) -> Polytope:
    """P minus W: every offset shrinks by the support of W along its normal."""
    return Polytope(P.normals, P.offsets - support_many(W, P.normals))


def minkowski_sum(P: Polytope, W: Polytope) -> Polytope:
    if P.dim != W.dim:
        raise GeometryError("dimension mismatch")
    if P.dim > 2:
        raise DimensionTooHigh("Minkowski sums are limited to dimension 2")
    VP = _vertex_cloud(P)
    VW = _vertex_cloud(W)
    pts = (VP[:, None, :] + VW[None, :, :]).reshape(-1, P.dim)
    return Polytope.from_vertices(pts)


def remove_redundant(P: Polytope, tol=SET_TOL, return_index=False):
    """Drop rows that do not shape the set. Kept rows keep their original order."""
    N, b = P.normals, P.offsets
    norms = np.linalg.norm(N, axis=1)
    if np.any((norms == 0) & (b < -tol)) or is_empty(P):
        raise EmptyPolytope("polytope is empty")
    if P.dim == 2 and _is_bounded(P) and len(_vertex_cloud(P)) >= 3:
        active = _facet_rows_2d(P, tol)
    else:
        active = _redundancy_by_lp(N, b, norms, tol)
    out = Polytope(N[active], b[active])
    if P._verts is not None:
        out._verts, out._bounded, out._empty = P._verts, P._bounded, P._empty
    return (out, active) if return_index else out


def _facet_rows_2d(P, tol):
    # each hull edge is supported by the lowest-index row tight at both ends
    N, b = P.normals, P.offsets
    V = vertices_2d(P)
    scale = np.maximum(1.0, np.abs(b))
    slack = b[:, None] - N @ V.T
    tight = slack <= 1e-9 * scale[:, None] * max(1.0, np.abs(V).max())
    rows = set()
    for k in range(len(V)):
        both = np.flatnonzero(tight[:, k] & tight[:, (k + 1) % len(V)])
        if both.size:
            rows.add(int(both[0]))
    return sorted(rows)


def _redundancy_by_lp(N, b, norms, tol):
    # parallel rows: keep the tightest, lowest index on ties
    cand = []
    for i in np.flatnonzero(norms > 0):
        u = N[i] / norms[i]
        clash = None
        for pos, j in enumerate(cand):
            if np.allclose(u, N[j] / norms[j], atol=1e-12):
                clash = pos
                break
        if clash is None:
            cand.append(int(i))
        elif b[i] / norms[i] < b[cand[clash]] / norms[cand[clash]] - 1e-15:
            cand[clash] = int(i)
    active = sorted(cand)
    for i in list(active):
        others = [j for j in active if j != i]
        if not others:
            continue
        A = np.vstack([N[others], N[i]])
        rhs = np.concatenate([b[others], [b[i] + 1.0]])
        sol = solve_lp(-N[i], A, rhs)
        if sol.status is Status.OPTIMAL and -sol.value <= b[i] + tol * max(1.0, abs(b[i])):
            active.remove(i)
    return active


def vertices_2d(P: Polytope) -> np.ndarray:
    """Counterclockwise vertices of a full-dimensional 2-D polytope."""
    if P.dim != 2:
        raise DimensionTooHigh("vertices_2d needs a 2-D polytope")
    V = _vertex_cloud(P)
    if len(V) < 3:
        raise GeometryError("polytope is degenerate (lower-dimensional)")
    c = V.mean(axis=0)
    order = np.argsort(np.arctan2(V[:, 1] - c[1], V[:, 0] - c[0]), kind="stable")
    return V[order]


def max_rpi(A_cl, constraints: Polytope, W: Polytope, cap=MRPI_CAP, return_provenance=False):
    """Maximal robust positively invariant set of x+ = A_cl x + w inside ``constraints``.

    The k-th pre-set contributes the rows ``n_i A_cl^k x <= b_i - sum_{j<k} h_W((A_cl^j)' n_i)``.
    Iteration stops as soon as every row of the next pre-set is redundant.
    With ``return_provenance`` the (row, power) origin of each kept row is returned too.
    """
    A_cl = np.atleast_2d(np.asarray(A_cl, dtype=float))
    if np.max(np.abs(np.linalg.eigvals(A_cl))) >= 1.0:
        raise GeometryError("A_cl must be strictly stable")
    N0, b0 = constraints.normals, constraints.offsets
    rows_N = [N0]
    rows_b = [b0]
    prov = [(i, 0) for i in range(len(b0))]
    Omega = Polytope(N0, b0)
    if is_empty(Omega):
        raise EmptySet("constraint set is empty")
    Omega, idx = remove_redundant(Omega, return_index=True)
    prov = [prov[i] for i in idx]
    Nk = N0.copy()
    tight = np.zeros_like(b0)
    for k in range(1, cap + 1):
        tight = tight + support_many(W, Nk)
        Nk = Nk @ A_cl
        bk = b0 - tight
        if is_empty(Omega):
            raise EmptySet("robust invariant set is empty")
        if Omega.dim <= 2 and _is_bounded(Omega):
            h = support_many(Omega, Nk)
        else:
            h = np.array([_support_or_inf(Omega, n) for n in Nk])
        if np.all(h <= bk + SET_TOL * np.maximum(1.0, np.abs(bk))):
            return (Omega, prov) if return_provenance else Omega
        cand = Omega & Polytope(Nk, bk)
        cand_prov = prov + [(i, k) for i in range(len(bk))]
        if is_empty(cand):
            raise EmptySet("robust invariant set is empty")
        Omega, idx = remove_redundant(cand, return_index=True)
        prov = [cand_prov[i] for i in idx]
    raise NotConverged(f"MRPI iteration did not converge in {cap} steps")


def min_rpi(A_cl, W: Polytope, eps=1e-3, max_terms=1000):
    """Outer approximation of the minimal RPI set (truncated Minkowski series, scaled)."""
    A_cl = np.atleast_2d(np.asarray(A_cl, dtype=float))
    if eps <= 0:
        raise GeometryError("eps must be positive")
    if np.max(np.abs(np.linalg.eigvals(A_cl))) >= 1.0:
        raise GeometryError("A_cl must be strictly stable")
    n = A_cl.shape[0]
    if n > 2:
        raise DimensionTooHigh("min_rpi is limited to dimension 2")
    VW = _vertex_cloud(W)
    # support of W along its own facets; W must contain the origin in its interior
    # for the alpha test, otherwise fall back to the bounding box ratio
    Wf = W
    g = Wf.offsets
    if np.any(g <= 0):
        raise GeometryError("W must contain the origin in its interior")
    unit = np.vstack([np.eye(n), -np.eye(n)])
    terms = [VW]
    power = np.eye(n)
    sum_support = support_many(W, unit)
    for s in range(1, max_terms + 1):
        power = A_cl @ power
        # alpha(s) = max_i h_W((A^s)' f_i) / g_i
        img = VW @ power.T
        alpha = np.max((Wf.normals @ img.T).max(axis=1) / g)
        gap = alpha / (1.0 - alpha) * np.sqrt(n) * np.max(sum_support) if alpha < 1 else np.inf
        if gap <= eps or np.allclose(img, 0.0):
            F = _sum_clouds(terms)
            if np.allclose(img, 0.0):
                return F
            return F.scale(1.0 / (1.0 - alpha))
        terms.append(img)
        sum_support = sum_support + (unit @ img.T).max(axis=1)
    raise NotConverged("mRPI series did not reach the requested accuracy")


def _sum_clouds(clouds):
    acc = Polytope.from_vertices(clouds[0])
    for c in clouds[1:]:
        pts = (acc.vertex_cloud()[:, None, :] + c[None, :, :]).reshape(-1, c.shape[1])
        acc = Polytope.from_vertices(pts)
    return acc


def invariance_violation(P: Polytope, A_cl, W: Polytope) -> float:
    """Largest constraint violation of A_cl v + w over vertices v of P and w of W."""
    A_cl = np.atleast_2d(np.asarray(A_cl, dtype=float))
    V = _vertex_cloud(P)
    VW = _vertex_cloud(W)
    succ = (V @ A_cl.T)[:, None, :] + VW[None, :, :]
    succ = succ.reshape(-1, P.dim)
    return float(np.max(succ @ P.normals.T - P.offsets))
