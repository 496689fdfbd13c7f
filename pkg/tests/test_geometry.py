import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import octagon
from safempc.geometry import (
    EmptyPolytope,
    DimensionTooHigh,
    Polytope,
    UnboundedDirection,
    contains,
    invariance_violation,
    is_empty,
    max_rpi,
    min_rpi,
    minkowski_sum,
    pontryagin_diff,
    remove_redundant,
    subset,
    support,
    vertices_2d,
)

BOX = Polytope.box([-1, -1], [1, 1])
OCT = Polytope.from_vertices(octagon(0.03))


def test_box_support():
    assert support(BOX, [1, 0]) == 1.0


def test_octagon_support_matches_vertices():
    for d in np.random.default_rng(0).normal(size=(20, 2)):
        assert support(OCT, d) == pytest.approx(np.max(octagon(0.03) @ d), abs=1e-14)


def test_support_lp_path_on_hrep_octagon():
    # same octagon given only by its facets, no cached vertices
    P = Polytope(OCT.normals, OCT.offsets)
    assert support(P, [1, 0]) == pytest.approx(np.max(octagon(0.03)[:, 0]), abs=1e-12)


def test_empty_support_raises():
    with pytest.raises(EmptyPolytope):
        support(Polytope([[1.0], [-1.0]], [0.0, -1.0]), [1.0])


def test_unbounded_support_raises():
    with pytest.raises(UnboundedDirection):
        support(Polytope([[1.0, 0.0]], [1.0]), [0.0, 1.0])


def test_pontryagin_box():
    R = pontryagin_diff(BOX, Polytope.box([-0.1, -0.1], [0.1, 0.1]))
    assert np.allclose(R.offsets, 0.9)


def test_pontryagin_origin_identity():
    Z = Polytope.from_vertices(np.zeros((1, 2)))
    assert np.allclose(pontryagin_diff(BOX, Z).offsets, BOX.offsets)


def test_pontryagin_box_octagon():
    R = pontryagin_diff(BOX, OCT)
    expected = 1.0 - np.array([np.max(octagon(0.03) @ n) for n in BOX.normals])
    assert np.allclose(R.offsets, expected)


def test_minkowski_interval():
    S = minkowski_sum(Polytope.box([-1], [1]), Polytope.box([-0.1], [0.1]))
    assert support(S, [1]) == pytest.approx(1.1)
    assert support(S, [-1]) == pytest.approx(1.1)


def test_minkowski_with_origin():
    S = minkowski_sum(BOX, Polytope.from_vertices(np.zeros((1, 2))))
    assert subset(S, BOX) and subset(BOX, S)


def test_minkowski_box_octagon_matches_vertex_sums():
    S = minkowski_sum(BOX, OCT)
    pts = (vertices_2d(BOX)[:, None, :] + octagon(0.03)[None]).reshape(-1, 2)
    for d in np.random.default_rng(1).normal(size=(50, 2)):
        assert support(S, d) == pytest.approx(np.max(pts @ d), abs=1e-12)


def test_minkowski_dimension_limit():
    C = Polytope.box(-np.ones(3), np.ones(3))
    with pytest.raises(DimensionTooHigh):
        minkowski_sum(C, C)


def test_basic_predicates():
    assert contains(BOX, [0, 0])
    small = Polytope.box([-0.5, -0.5], [0.5, 0.5])
    assert subset(small, BOX)
    assert not subset(BOX, small)
    assert is_empty(Polytope([[1.0, 0.0], [-1.0, 0.0], [0, 1], [0, -1]], [0.0, -1.0, 1, 1]))


def test_remove_redundant_duplicate_facet():
    P = Polytope(np.vstack([BOX.normals, BOX.normals[:1]]), np.concatenate([BOX.offsets, [1.0]]))
    assert remove_redundant(P).n_facets == 4


def test_remove_redundant_lp_path():
    # 3-D cube with a slack row
    N = np.vstack([np.eye(3), -np.eye(3), [[1, 1, 1]]])
    P = Polytope(N, np.concatenate([np.ones(6), [5.0]]))
    assert remove_redundant(P).n_facets == 6


def test_vertices_ccw():
    V = vertices_2d(BOX)
    area = 0.5 * sum(V[i, 0] * V[(i + 1) % 4, 1] - V[(i + 1) % 4, 0] * V[i, 1] for i in range(4))
    assert area == pytest.approx(4.0)


def test_vertices_rejects_degenerate():
    seg = Polytope.from_vertices(np.array([[0.0, 0.0], [1.0, 1.0]]))
    with pytest.raises(ValueError):
        vertices_2d(seg)
    assert support(seg, [1, 1]) == pytest.approx(2.0)


def test_json_round_trip():
    P = Polytope.from_json(OCT.to_json())
    assert np.array_equal(P.normals, OCT.normals) and np.array_equal(P.offsets, OCT.offsets)


def test_max_rpi_deadbeat():
    W = Polytope.box([-0.1, -0.1], [0.1, 0.1])
    O = max_rpi(np.zeros((2, 2)), BOX, W)
    # x+ = w always lands in W, so the box itself is invariant
    assert subset(O, BOX) and subset(BOX, O)


def test_max_rpi_contraction_keeps_box():
    Z = Polytope.from_vertices(np.zeros((1, 2)))
    O = max_rpi(0.5 * np.eye(2), BOX, Z)
    assert subset(BOX, O)


def test_max_rpi_monte_carlo_invariance():
    A = np.array([[0.9, 0.2], [-0.1, 0.7]])
    W = Polytope.box([-0.05, -0.05], [0.05, 0.05])
    O = max_rpi(A, BOX, W)
    rng = np.random.default_rng(5)
    V = vertices_2d(O)
    lam = rng.dirichlet(np.ones(len(V)), size=10_000)
    X = lam @ V
    for w in W.vertex_cloud():
        succ = X @ A.T + w
        assert np.all(succ @ O.normals.T <= O.offsets + 1e-9)


def test_min_rpi_deadbeat():
    W = Polytope.box([-0.1, -0.1], [0.1, 0.1])
    F = min_rpi(np.zeros((2, 2)), W)
    assert subset(F, W) and subset(W, F)


def test_min_rpi_scalar_series():
    F = min_rpi(np.array([[0.5]]), Polytope.box([-0.1], [0.1]), eps=1e-6)
    assert support(F, [1]) >= 0.2 - 1e-12
    assert support(F, [1]) <= 0.2 + 1e-6


def test_min_rpi_invariant_and_contains_w():
    A = np.array([[0.6, 0.3], [-0.2, 0.5]])
    F = min_rpi(A, OCT, eps=1e-5)
    assert invariance_violation(F, A, OCT) <= 1e-9
    assert subset(OCT, F)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_support_homogeneous_subadditive(seed):
    rng = np.random.default_rng(seed)
    P = Polytope.from_vertices(rng.normal(size=(7, 2)))
    d1, d2 = rng.normal(size=(2, 2))
    c = rng.uniform(0.1, 10)
    assert support(P, c * d1) == pytest.approx(c * support(P, d1), rel=1e-12, abs=1e-12)
    assert support(P, d1 + d2) <= support(P, d1) + support(P, d2) + 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_pontryagin_minkowski_round_trip(seed):
    rng = np.random.default_rng(seed)
    lo = rng.uniform(-2, -0.5, 2)
    hi = rng.uniform(0.5, 2, 2)
    P = Polytope.box(lo, hi)
    W = Polytope.from_vertices(octagon(rng.uniform(0.01, 0.3), rng.uniform(0, np.pi)))
    D = pontryagin_diff(P, W)
    assert subset(minkowski_sum(D, W), P)
