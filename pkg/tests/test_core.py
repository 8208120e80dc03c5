from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from heavytouch.core import (
    Ball,
    Box,
    BoxFace,
    BoxFamily,
    CheckCounter,
    ConstraintSet,
    DimensionError,
    HingeRankingObjective,
    InfeasiblePointError,
    LeastSquaresObjective,
    LinearObjective,
    LinearRow,
    LinearRowsFamily,
    Ordering,
    OrderingFamily,
    Problem,
    ProblemMetadata,
    QuadraticObjective,
    aggregate,
    eval_max_constraint,
    gamma_for_known_family,
    gamma_from_interior_point,
    penalized_objective,
    rho_from_interior_point,
)
from heavytouch.projections import project_ordering

SQRT2 = math.sqrt(2.0)


def chain(d):
    return ConstraintSet(d, [Ordering(i, i + 1) for i in range(d - 1)])


def box_faces(d, bound=1.0):
    kinds = []
    for i in range(d):
        kinds += [BoxFace(i, 1, bound), BoxFace(i, -1, bound)]
    return ConstraintSet(d, kinds)


def mixed_set(rng, d):
    kinds = [Ordering(0, d - 1), BoxFace(1 % d, -1, 0.3), LinearRow(rng.standard_normal(d), 0.2)]
    return ConstraintSet(d, kinds)


# --------------------------------------------------------------------------
# Domains


def test_box_diameter_is_at_least_one_and_the_diagonal():
    assert Box.cube(2, 0.0, 0.1).diameter_bound == 1.0
    assert Box.cube(4, -1.0, 1.0).diameter_bound == pytest.approx(4.0)


def test_ball_diameter():
    assert Ball(np.zeros(3), 2.0).diameter_bound == 4.0
    assert Ball(np.zeros(3), 0.1).diameter_bound == 1.0


def test_domain_validation():
    with pytest.raises(ValueError):
        Box(np.array([0.0, 1.0]), np.array([1.0, 1.0]))
    with pytest.raises(ValueError):
        Ball(np.zeros(2), 0.0)
    with pytest.raises(ValueError):
        Box.cube(2, -1, 1).__class__(np.zeros(2), np.ones(2), diameter=0.5)


# --------------------------------------------------------------------------
# Constraint evaluation


def test_eval_max_sorted_vector_ties_to_first():
    counter = CheckCounter()
    value, i = eval_max_constraint(chain(3), np.array([1.0, 2.0, 3.0]), counter)
    assert value == pytest.approx(-1 / SQRT2)
    assert i == 0
    assert counter.count == 2


def test_eval_max_unsorted_vector():
    value, i = eval_max_constraint(chain(3), np.array([3.0, 1.0, 2.0]))
    assert value == pytest.approx(SQRT2)
    assert i == 0


def test_eval_max_box_faces_at_origin():
    value, _ = eval_max_constraint(box_faces(3), np.zeros(3))
    assert value == -1.0


def test_eval_max_dimension_mismatch():
    with pytest.raises(DimensionError):
        eval_max_constraint(chain(3), np.zeros(4))


def test_constraint_indices_validated():
    with pytest.raises(ValueError):
        ConstraintSet(2, [Ordering(0, 2)])
    with pytest.raises(ValueError):
        ConstraintSet(2, [BoxFace(0, 2, 1.0)])
    with pytest.raises(ValueError):
        ConstraintSet(2, [LinearRow(np.zeros(2), 1.0)])


def test_checks_are_counted_per_touch(rng):
    cs = mixed_set(rng, 4)
    counter = CheckCounter()
    w = rng.standard_normal(4)
    cs.evaluate(0, w, counter)
    cs.value_and_row(1, w, counter)
    cs.evaluate_subset(np.array([0, 2]), w, counter)
    cs.evaluate_all(w, counter)
    assert counter.count == 1 + 1 + 2 + 3


@given(st.integers(0, 10_000))
def test_subgradient_inequality(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(2, 7))
    cs = mixed_set(rng, d)
    for _ in range(20):
        w, w2 = rng.standard_normal(d), rng.standard_normal(d)
        for i in range(cs.count):
            lhs = cs.evaluate(i, w2)
            rhs = cs.evaluate(i, w) + cs.subgradient(i, w) @ (w2 - w)
            assert lhs >= rhs - 1e-10


def test_subgradient_matches_finite_differences(rng):
    d = 5
    cs = mixed_set(rng, d)
    eps = 1e-6
    for _ in range(100):
        w = rng.standard_normal(d)
        for i in range(cs.count):
            if abs(cs.evaluate(i, w)) < 1e-3:
                continue
            fd = np.array(
                [(cs.evaluate(i, w + eps * e) - cs.evaluate(i, w - eps * e)) / (2 * eps) for e in np.eye(d)]
            )
            np.testing.assert_allclose(fd, cs.subgradient(i, w), atol=1e-5)


# --------------------------------------------------------------------------
# Aggregation


def test_aggregate_groups():
    cs = box_faces(3)  # m = 6
    assert [g.tolist() for g in aggregate(cs, 2).groups] == [[0, 1, 2], [3, 4, 5]]
    cs5 = ConstraintSet(5, [BoxFace(i, 1, 1.0) for i in range(5)])
    assert [g.tolist() for g in aggregate(cs5, 2).groups] == [[0, 1, 2], [3, 4]]
    assert [g.tolist() for g in aggregate(cs5, 5).groups] == [[i] for i in range(5)]


def test_aggregate_drops_empty_trailing_groups():
    cs = ConstraintSet(5, [BoxFace(i, 1, 1.0) for i in range(5)])
    agg = aggregate(cs, 4)  # size 2 -> groups {0,1},{2,3},{4}
    assert agg.count == 3
    assert max(agg.group_sizes) <= math.ceil(5 / 4)


def test_aggregate_rejects_zero_groups():
    with pytest.raises(ValueError):
        aggregate(chain(4), 0)


@given(st.integers(0, 10_000), st.integers(1, 12))
def test_aggregation_preserves_max(seed, groups):
    rng = np.random.default_rng(seed)
    cs = chain(13)
    agg = aggregate(cs, groups)
    w = rng.standard_normal(13)
    assert agg.evaluate_all(w).max() == cs.evaluate_all(w).max()
    for i in range(agg.count):
        # single-row and dense evaluation may differ in the last ulp
        assert agg.evaluate(i, w) == pytest.approx(cs.evaluate_all(w)[agg.groups[i]].max(), rel=1e-14, abs=1e-15)


def test_aggregated_touch_charges_group_size(rng):
    agg = aggregate(chain(10), 3)  # 9 constraints in groups of 3
    counter = CheckCounter()
    agg.value_and_row(1, rng.standard_normal(10), counter)
    assert counter.count == 3


# --------------------------------------------------------------------------
# Objectives


def _oracle_mean(obj, w, n, seed=0):
    rng = np.random.default_rng(seed)
    return np.mean([obj.sample_subgradient(w, rng) for _ in range(n)], axis=0)


def test_least_squares_oracle_is_unbiased(rng):
    X = rng.standard_normal((6, 3))
    obj = LeastSquaresObjective(X, rng.standard_normal(6))
    w = rng.standard_normal(3)
    # exact expectation: enumerate the rows
    rows = np.array([X[i] * (X[i] @ w - obj.y[i]) for i in range(6)])
    np.testing.assert_allclose(rows.mean(axis=0), obj.full_subgradient(w), atol=1e-12)
    np.testing.assert_allclose(_oracle_mean(obj, w, 20000), obj.full_subgradient(w), atol=0.1)


def test_hinge_oracle_is_unbiased(rng):
    from scipy import sparse

    Z = sparse.random(40, 5, density=0.4, random_state=1, format="csr")
    obj = HingeRankingObjective(Z)
    w = rng.standard_normal(5) * 0.1
    np.testing.assert_allclose(_oracle_mean(obj, w, 40000), obj.full_subgradient(w), atol=0.02)


def test_oracle_norm_bounds(rng):
    X = rng.standard_normal((30, 4))
    dom = Box.cube(4, -1, 1)
    obj = LeastSquaresObjective(X, rng.standard_normal(30))
    G = obj.gradient_bound(dom)
    for _ in range(2000):
        w = rng.uniform(-1, 1, 4)
        assert np.linalg.norm(obj.sample_subgradient(w, rng)) <= G
    q = QuadraticObjective(np.ones(2), 2.0, noise=0.5)
    Gq = q.gradient_bound(Box.cube(2, -2, 2))
    for _ in range(2000):
        assert np.linalg.norm(q.sample_subgradient(rng.uniform(-2, 2, 2), rng)) <= Gq


def test_metadata_must_be_nonnegative():
    with pytest.raises(ValueError):
        ProblemMetadata(L_f=-1.0, L_g=1.0, G_f=1.0, G_g=1.0)


# --------------------------------------------------------------------------
# Penalized objective and gamma


def _toy(gamma_family=None):
    return Problem(
        LinearObjective(np.array([1.0])),
        ConstraintSet(1, [BoxFace(0, -1, 0.0)]),
        Box.cube(1, -1, 1),
        ProblemMetadata(1, 1, 1, 1),
        family=gamma_family,
    )


def test_penalized_objective_examples():
    p = _toy()
    assert penalized_objective(p, 2.0, np.array([-0.5])) == pytest.approx(0.5)
    assert penalized_objective(p, 2.0, np.array([0.3])) == pytest.approx(0.3)
    assert penalized_objective(p, 2.0, np.array([0.0])) == 0.0
    with pytest.raises(ValueError):
        penalized_objective(p, 0.0, np.array([0.0]))


def test_rho_from_ball_linear_rows():
    d = 3
    rows = [LinearRow(np.eye(d)[i], 1.0) for i in range(d)]
    cs = ConstraintSet(d, rows)
    assert rho_from_interior_point(cs, Ball(np.zeros(d), 2.0), np.zeros(d)) == pytest.approx(0.25)


def test_rho_when_slack_equals_diameter():
    cs = ConstraintSet(1, [BoxFace(0, 1, 1.0)])
    dom = Box.cube(1, -0.25, 0.25)  # D_w = 1
    assert rho_from_interior_point(cs, dom, np.array([0.0])) == pytest.approx(1.0)


def test_rho_ordering_on_unit_cube():
    rho = rho_from_interior_point(chain(3), Box.cube(3, 0, 1), np.array([0.0, 0.5, 1.0]))
    assert rho == pytest.approx(1 / (2 * math.sqrt(6)))


def test_rho_requires_strict_feasibility():
    with pytest.raises(InfeasiblePointError):
        rho_from_interior_point(chain(3), Box.cube(3, 0, 1), np.array([0.0, 0.0, 1.0]))


def test_known_families():
    e = gamma_for_known_family(BoxFamily(4), 1.0)
    assert (e.rho, e.gamma, e.provenance) == (0.5, pytest.approx(2.02), "known_family")
    e = gamma_for_known_family(OrderingFamily(5), 1.0)
    assert (e.rho, e.gamma) == (0.25, pytest.approx(4.04))
    e = gamma_for_known_family(LinearRowsFamily(2.0, 1.0), 1.0)
    assert e.gamma == pytest.approx(4.04)


def test_gamma_exceeds_bound_from_interior_point():
    p = _toy()
    est = gamma_from_interior_point(p, np.array([0.5]))
    assert est.provenance == "lemma_gamma"
    assert est.gamma > p.metadata.L_f / est.rho


def _ordering_problem(d, c):
    return Problem(
        LinearObjective(c),
        chain(d),
        Box.cube(d, -50, 50),
        ProblemMetadata(float(np.linalg.norm(c)), 1.0, float(np.linalg.norm(c)), 1.0),
        family=OrderingFamily(d),
    )


@given(st.integers(0, 10_000))
def test_penalty_dominates_projected_value(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(2, 8))
    p = _ordering_problem(d, rng.standard_normal(d))
    gamma = p.gamma_estimate().gamma
    w = rng.standard_normal(d)
    if p.constraints.max_violation(w) == 0:
        w = np.sort(w)[::-1].copy()
    assert penalized_objective(p, gamma, w) >= p.objective.full_value(project_ordering(w)) - 1e-12


def test_projection_distance_bound(rng):
    d = 6
    p = _ordering_problem(d, rng.standard_normal(d))
    est = p.gamma_estimate()
    gamma, rho, L_f = est.gamma, est.rho, p.metadata.L_f
    checked = 0
    while checked < 100:
        w = rng.standard_normal(d) * 3
        if p.constraints.max_violation(w) == 0:
            continue
        proj = project_ordering(w)
        gap = penalized_objective(p, gamma, w) - penalized_objective(p, gamma, proj)
        assert np.linalg.norm(w - proj) <= gap / (gamma * rho - L_f) + 1e-9
        checked += 1


def test_problem_dimension_mismatch():
    with pytest.raises(DimensionError):
        Problem(LinearObjective(np.ones(2)), chain(3), Box.cube(3, -1, 1), ProblemMetadata(1, 1, 1, 1))
