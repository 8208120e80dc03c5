from __future__ import annotations

import csv
import filecmp

import numpy as np
import pytest
from scipy import sparse

from heavytouch.bench import (
    CSV_HEADER,
    BoxQP,
    ExperimentPlan,
    GeneratorSpec,
    MonotonicRanking,
    OrderingRegression,
    generate,
    grid_pairs,
    read_trace,
    repetition_seed,
    run_experiment,
    write_trace,
)
from heavytouch.solvers import SolverConfig, solve

REAL = [
    OrderingRegression(6, 100),
    MonotonicRanking(16, 300, 4, "grid"),
    MonotonicRanking(10, 200, 3, "chain"),
    BoxQP(5, 20.0),
]


def test_grid_has_112_pairs():
    assert len(grid_pairs(8)) == 112
    p = generate(GeneratorSpec(MonotonicRanking(64, 50, 4, "grid"), 0))
    assert p.constraints.count == 112


def test_chain_sizes():
    assert generate(GeneratorSpec(OrderingRegression(7, 20), 0)).constraints.count == 6
    assert generate(GeneratorSpec(MonotonicRanking(9, 20, 3, "chain"), 0)).constraints.count == 8
    assert generate(GeneratorSpec(BoxQP(3), 0)).constraints.count == 6


@pytest.mark.parametrize("kind", REAL)
def test_interior_point_is_strictly_feasible(kind):
    p = generate(GeneratorSpec(kind, 5))
    g = p.constraints.evaluate_all(p.interior_point)
    assert g.max() < 0
    assert p.domain.contains(p.interior_point)
    assert p.gamma_estimate().gamma > 0


@pytest.mark.parametrize(
    "kind",
    [
        OrderingRegression(1, 10),
        OrderingRegression(4, 0),
        MonotonicRanking(15, 10, 4, "grid"),
        MonotonicRanking(8, 10, 0),
        BoxQP(0),
        BoxQP(3, 0.5),
    ],
)
def test_degenerate_specs_raise(kind):
    with pytest.raises(ValueError):
        generate(GeneratorSpec(kind, 0))


@pytest.mark.parametrize("kind", REAL)
def test_metadata_bounds_hold_on_samples(kind):
    p = generate(GeneratorSpec(kind, 1))
    rng = np.random.default_rng(0)
    lo, hi = p.domain.lower, p.domain.upper
    meta = p.metadata
    for _ in range(10_000):
        w = rng.uniform(lo, hi)
        assert np.linalg.norm(p.objective.sample_subgradient(w, rng)) <= meta.G_f * (1 + 1e-12)
    rows = sparse.csr_matrix(p.constraints.matrix)
    norms = np.sqrt(np.asarray(rows.multiply(rows).sum(axis=1)).ravel())
    assert norms.max() <= meta.G_g * (1 + 1e-12)
    assert norms.max() <= meta.L_g * (1 + 1e-12)
    # the mean subgradient is bounded by L_f in norm
    w = rng.uniform(lo, hi)
    assert np.linalg.norm(p.objective.full_subgradient(w)) <= meta.L_f * (1 + 1e-12)


def test_same_seed_same_data():
    a = generate(GeneratorSpec(MonotonicRanking(16, 100, 4, "grid"), 3))
    b = generate(GeneratorSpec(MonotonicRanking(16, 100, 4, "grid"), 3))
    c = generate(GeneratorSpec(MonotonicRanking(16, 100, 4, "grid"), 4))
    assert (a.objective.Z != b.objective.Z).nnz == 0
    assert (a.objective.Z != c.objective.Z).nnz > 0


def test_trace_csv_roundtrip(tmp_path):
    p = generate(GeneratorSpec(OrderingRegression(5, 50), 0))
    r = solve(p, SolverConfig(algorithm="practical", T=200, gamma=20.0, trace_every=20))
    path = tmp_path / "t.csv"
    write_trace(path, r)
    with open(path, newline="") as fh:
        assert next(csv.reader(fh)) == list(CSV_HEADER)
    rows = read_trace(path)
    assert len(rows) == len(r.trace)
    assert all(isinstance(row["iteration"], int) and isinstance(row["checks"], int) for row in rows)
    checks = [row["checks"] for row in rows]
    assert checks == sorted(checks)
    assert rows[-1]["objective"] == r.trace[-1].objective_of_projected_average


def test_read_trace_rejects_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_trace(path)


def test_repetition_seeds_differ():
    seeds = {repetition_seed(0, r) for r in range(20)}
    assert len(seeds) == 20
    assert repetition_seed(5, 2) == repetition_seed(5, 2)


def _plan(out, jobs=1):
    cfg = dict(T=300, gamma=20.0, trace_every=30, seed=11)
    return ExperimentPlan(
        problem=GeneratorSpec(OrderingRegression(6, 80), 2),
        runs=[
            (SolverConfig(algorithm="full", **cfg), "full"),
            (SolverConfig(algorithm="practical", **cfg), "practical"),
        ],
        repetitions=3,
        output_path=out,
        jobs=jobs,
    )


def test_experiment_files_and_aggregate(tmp_path):
    summary = run_experiment(_plan(tmp_path / "a"))
    names = sorted(f.name for f in summary.files)
    assert len(names) == 7
    assert "aggregate.csv" in names and "practical_rep2.csv" in names
    agg = list(csv.DictReader(open(tmp_path / "a" / "aggregate.csv")))
    assert list(agg[0]) == ["label", *CSV_HEADER]
    for label in ("full", "practical"):
        reps = [read_trace(tmp_path / "a" / f"{label}_rep{r}.csv") for r in range(3)]
        mine = [row for row in agg if row["label"] == label]
        assert len(mine) == len(reps[0])
        for i, row in enumerate(mine):
            expect = np.mean([rep[i]["objective"] for rep in reps])
            assert float(row["objective"]) == pytest.approx(expect, rel=1e-15)
            assert float(row["checks"]) == np.mean([rep[i]["checks"] for rep in reps])
    assert len(summary.labels["full"].final_objective) == 3


def test_experiment_rerun_is_byte_identical(tmp_path):
    run_experiment(_plan(tmp_path / "a"))
    run_experiment(_plan(tmp_path / "b", jobs=2))
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names, shallow=False)
    assert mismatch == [] and errors == []
    assert len(match) == 7


def test_plan_validation(tmp_path):
    cfg = SolverConfig(T=10)
    with pytest.raises(ValueError):
        ExperimentPlan(GeneratorSpec(OrderingRegression(3, 10), 0), [(cfg, "x"), (cfg, "x")])
    with pytest.raises(ValueError):
        ExperimentPlan(GeneratorSpec(OrderingRegression(3, 10), 0), [(cfg, "x")], repetitions=0)
    with pytest.raises(ValueError):
        ExperimentPlan(GeneratorSpec(OrderingRegression(3, 10), 0), [(cfg, "a/b")])
