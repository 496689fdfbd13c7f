"""Linear dynamics, parametrized disturbance sets and transition data."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from safempc.geometry import Polytope, _is_bounded, is_empty


@dataclass(frozen=True)
class LinearModel:
    A: np.ndarray
    B: np.ndarray
    b: np.ndarray = None

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        n = A.shape[0]
        B = np.asarray(self.B, dtype=float).reshape(n, -1)
        b = np.zeros(n) if self.b is None else np.asarray(self.b, dtype=float).ravel()
        if A.shape != (n, n) or b.size != n:
            raise ValueError("inconsistent model dimensions")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "b", b)

    @property
    def nx(self):
        return self.A.shape[0]

    @property
    def nu(self):
        return self.B.shape[1]

    def predict(self, s, a):
        return self.A @ np.atleast_1d(s) + self.B @ np.atleast_1d(a) + self.b


@dataclass(frozen=True)
class NoiseModel:
    M: np.ndarray
    m: np.ndarray

    def __post_init__(self):
        M = np.atleast_2d(np.asarray(self.M, dtype=float))
        m = np.atleast_1d(np.asarray(self.m, dtype=float)).ravel()
        if M.shape[0] != m.size:
            raise ValueError("M rows and m length differ")
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "m", m)

    def polytope(self) -> Polytope:
        return Polytope(self.M, self.m)

    def is_valid(self) -> bool:
        P = self.polytope()
        return _is_bounded(P) and not is_empty(P)


@dataclass(frozen=True)
class TransitionRecord:
    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray

    def __post_init__(self):
        for name in ("s", "a", "s_next"):
            v = np.atleast_1d(np.asarray(getattr(self, name), dtype=float)).ravel()
            if not np.all(np.isfinite(v)):
                raise ValueError(f"non-finite entry in {name}")
            object.__setattr__(self, name, v)


@dataclass
class DataSet:
    """Append-only transition store; keeps every record of a run."""

    records: list = field(default_factory=list)

    def append(self, rec: TransitionRecord):
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def to_csv(self) -> str:
        buf = io.StringIO()
        if not self.records:
            return ""
        r0 = self.records[0]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"s{i}" for i in range(r0.s.size)] + [f"a{i}" for i in range(r0.a.size)]
                   + [f"s_next{i}" for i in range(r0.s_next.size)])
        for r in self.records:
            w.writerow([repr(float(x)) for x in np.concatenate([r.s, r.a, r.s_next])])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        rows = list(csv.reader(io.StringIO(text)))
        if not rows:
            return cls()
        head = rows[0]
        ns = sum(h.startswith("s") and not h.startswith("s_next") for h in head)
        na = sum(h.startswith("a") for h in head)
        out = cls()
        for row in rows[1:]:
            v = np.array([float(x) for x in row])
            out.append(TransitionRecord(v[:ns], v[ns:ns + na], v[ns + na:]))
        return out


def residual(model: LinearModel, rec: TransitionRecord) -> np.ndarray:
    return rec.s_next - model.predict(rec.s, rec.a)


def residuals(model: LinearModel, data) -> np.ndarray:
    recs = list(data)
    if not recs:
        return np.zeros((0, model.nx))
    return np.array([residual(model, r) for r in recs])


def membership_constraints(data, model: LinearModel, n_facets: int, m):
    """Linear inequalities on vec(M) (row-major) stating M w_i <= m for each residual w_i.

    Returns ``(G, h)`` with one row per (record, facet): ``G @ vec(M) <= h``.
    """
    W = residuals(model, data)
    m = np.atleast_1d(np.asarray(m, dtype=float))
    nx = model.nx
    if W.shape[0] == 0 or n_facets == 0:
        return np.zeros((0, n_facets * nx)), np.zeros(0)
    rows = []
    rhs = []
    for w in W:
        for j in range(n_facets):
            g = np.zeros(n_facets * nx)
            g[j * nx:(j + 1) * nx] = w
            rows.append(g)
            rhs.append(m[j])
    return np.array(rows), np.array(rhs)


def one_step_dispersion(model: LinearModel, noise: NoiseModel, s, a) -> Polytope:
    """{A s + B a + b} translated noise set."""
    c = model.predict(s, a)
    return Polytope(noise.M, noise.m + noise.M @ c)
