"""Problem generators, the experiment runner and CSV traces."""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Union

import numpy as np
from scipy import sparse

from .core import (
    Box,
    BoxFace,
    BoxFamily,
    ConstraintSet,
    LeastSquaresObjective,
    LinearObjective,
    HingeRankingObjective,
    Ordering,
    OrderingFamily,
    Problem,
    ProblemMetadata,
    QuadraticObjective,
)
from .solvers import SolverConfig, SolverResult, solve

CSV_HEADER = (
    "iteration",
    "checks",
    "objective",
    "violation",
    "k_f",
    "k_g",
    "k_p",
    "p_entropy",
    "elapsed_ns",
)


# --------------------------------------------------------------------------
# Generators


@dataclass(frozen=True)
class OrderingRegression:
    """Least squares to a noisy sorted target under ``w_1 <= ... <= w_d``."""

    d: int
    n: int
    noise_sd: float = 0.1


@dataclass(frozen=True)
class MonotonicRanking:
    """Pairwise hinge loss on sparse ``+-1`` difference vectors with monotonicity pairs.

    ``pair_structure`` is ``"chain"`` (``d - 1`` pairs) or ``"grid"`` (``d``
    must be a square ``r * r``; ``2 r (r - 1)`` lattice edges).
    """

    d: int
    n: int
    sparsity: int = 4
    pair_structure: str = "chain"
    label_noise: float = 0.1


@dataclass(frozen=True)
class BoxQP:
    """Strongly convex least squares with faces ``-1 <= w_i <= 1`` on the domain ``[-2, 2]^d``."""

    d: int
    condition: float = 10.0


@dataclass(frozen=True)
class ToyLinear:
    """``min w`` subject to ``w >= 0`` on ``[-1, 1]``; optimum 0."""


@dataclass(frozen=True)
class ToyQuadratic:
    """``min (w - 1)^2`` subject to ``w <= 0`` on ``[-2, 2]`` with noisy gradients; optimum 0."""

    noise: float = 0.5


GeneratorKind = Union[OrderingRegression, MonotonicRanking, BoxQP, ToyLinear, ToyQuadratic]


@dataclass(frozen=True)
class GeneratorSpec:
    kind: GeneratorKind
    seed: int = 0


def generate(spec: GeneratorSpec) -> Problem:
    """Build the problem described by ``spec``; identical specs give identical data."""
    rng = np.random.default_rng(spec.seed)
    kind = spec.kind
    if isinstance(kind, OrderingRegression):
        return _ordering_regression(kind, rng)
    if isinstance(kind, MonotonicRanking):
        return _monotonic_ranking(kind, rng)
    if isinstance(kind, BoxQP):
        return _box_qp(kind, rng)
    if isinstance(kind, ToyLinear):
        return toy_linear()
    if isinstance(kind, ToyQuadratic):
        return toy_quadratic(kind.noise)
    raise TypeError(f"unknown generator {kind!r}")


def chain_pairs(d: int) -> list[tuple[int, int]]:
    return [(i, i + 1) for i in range(d - 1)]


def grid_pairs(r: int) -> list[tuple[int, int]]:
    """Right and down edges of an ``r x r`` lattice in row-major order."""
    pairs = []
    for a in range(r):
        for b in range(r):
            i = a * r + b
            if b + 1 < r:
                pairs.append((i, i + 1))
            if a + 1 < r:
                pairs.append((i, i + r))
    return pairs


def _ordering_regression(kind: OrderingRegression, rng: np.random.Generator) -> Problem:
    d, n = kind.d, kind.n
    if d < 2:
        raise ValueError("ordering regression needs d >= 2")
    if n < 1:
        raise ValueError("need at least one example")
    if kind.noise_sd < 0:
        raise ValueError("noise_sd must be nonnegative")
    domain = Box.cube(d, -1.0, 1.0)
    truth = np.sort(rng.uniform(-0.9, 0.9, d))
    X = rng.standard_normal((n, d))
    y = X @ truth + kind.noise_sd * rng.standard_normal(n)
    objective = LeastSquaresObjective(X, y)
    constraints = ConstraintSet(d, [Ordering(i, j) for i, j in chain_pairs(d)])
    metadata = ProblemMetadata(
        L_f=objective.lipschitz_bound(domain),
        L_g=1.0,
        G_f=objective.gradient_bound(domain),
        G_g=1.0,
        lam=objective.strong_convexity,
    )
    return Problem(
        objective,
        constraints,
        domain,
        metadata,
        interior_point=np.linspace(-0.5, 0.5, d),
        family=OrderingFamily(d),
        name=f"ordering_regression_d{d}_n{n}",
        extras={"truth": truth},
    )


def _monotonic_ranking(kind: MonotonicRanking, rng: np.random.Generator) -> Problem:
    d, n, s = kind.d, kind.n, kind.sparsity
    if n < 1:
        raise ValueError("need at least one example")
    if not 1 <= s <= d:
        raise ValueError("sparsity must lie in [1, d]")
    if not 0 <= kind.label_noise < 0.5:
        raise ValueError("label noise must lie in [0, 0.5)")
    if kind.pair_structure == "chain":
        if d < 2:
            raise ValueError("chain pairs need d >= 2")
        pairs = chain_pairs(d)
        level = np.arange(d, dtype=float)
    elif kind.pair_structure == "grid":
        r = math.isqrt(d)
        if r * r != d or r < 2:
            raise ValueError("grid pairs need d = r*r with r >= 2")
        pairs = grid_pairs(r)
        a, b = np.divmod(np.arange(d), r)
        level = (a + b).astype(float)
    else:
        raise ValueError(f"unknown pair structure {kind.pair_structure!r}")

    # planted monotone truth plus a centered, strictly increasing interior point
    centered = level - level.mean()
    span = max(1.0, float(np.abs(centered).max()))
    truth = np.sort(rng.uniform(0.0, 1.0, d))[np.argsort(np.argsort(level, kind="stable"))]
    truth = 4.0 * (truth - truth.mean())
    interior = 5.0 * centered / span

    cols = np.stack([rng.choice(d, size=s, replace=False) for _ in range(n)])
    vals = rng.choice(np.array([-1.0, 1.0]), size=(n, s))
    margins = np.einsum("ij,ij->i", vals, truth[cols])
    flip = np.where(margins < 0, -1.0, 1.0)
    flip[rng.random(n) < kind.label_noise] *= -1.0
    vals *= flip[:, None]
    Z = sparse.csr_matrix(
        (vals.ravel(), cols.ravel(), np.arange(0, n * s + 1, s)), shape=(n, d)
    )
    Z.sort_indices()
    objective = HingeRankingObjective(Z)
    domain = Box.cube(d, -10.0, 10.0)
    constraints = ConstraintSet(d, [Ordering(i, j) for i, j in pairs])
    metadata = ProblemMetadata(
        L_f=objective.lipschitz_bound(domain),
        L_g=1.0,
        G_f=objective.gradient_bound(domain),
        G_g=1.0,
    )
    return Problem(
        objective,
        constraints,
        domain,
        metadata,
        interior_point=interior,
        name=f"monotonic_ranking_{kind.pair_structure}_d{d}_n{n}",
        extras={"truth": truth, "pairs": pairs},
    )


def _box_qp(kind: BoxQP, rng: np.random.Generator) -> Problem:
    d = kind.d
    if d < 1:
        raise ValueError("box QP needs d >= 1")
    if not kind.condition >= 1:
        raise ValueError("condition number must be at least 1")
    n = 2 * d
    U, _ = np.linalg.qr(rng.standard_normal((n, d)))
    V, _ = np.linalg.qr(rng.standard_normal((d, d)))
    singular = np.sqrt(n * np.geomspace(1.0, kind.condition, d))
    X = (U * singular) @ V.T
    truth = rng.uniform(-1.5, 1.5, d)
    y = X @ truth
    objective = LeastSquaresObjective(X, y)
    domain = Box.cube(d, -2.0, 2.0)
    faces = []
    for i in range(d):
        faces.append(BoxFace(i, 1, 1.0))
        faces.append(BoxFace(i, -1, 1.0))
    constraints = ConstraintSet(d, faces)
    metadata = ProblemMetadata(
        L_f=objective.lipschitz_bound(domain),
        L_g=1.0,
        G_f=objective.gradient_bound(domain),
        G_g=1.0,
        lam=objective.strong_convexity,
    )
    return Problem(
        objective,
        constraints,
        domain,
        metadata,
        interior_point=np.zeros(d),
        family=BoxFamily(d),
        name=f"box_qp_d{d}",
        extras={"truth": truth},
    )


def toy_linear() -> Problem:
    domain = Box.cube(1, -1.0, 1.0)
    return Problem(
        LinearObjective(np.array([1.0])),
        ConstraintSet(1, [BoxFace(0, -1, 0.0)]),
        domain,
        ProblemMetadata(L_f=1.0, L_g=1.0, G_f=1.0, G_g=1.0),
        interior_point=np.array([0.5]),
        name="toy_linear",
    )


def toy_quadratic(noise: float = 0.5) -> Problem:
    domain = Box.cube(1, -2.0, 2.0)
    objective = QuadraticObjective(np.array([1.0]), 2.0, noise=noise)
    L_f = 6.0  # max |2 (w - 1)| on [-2, 2]
    return Problem(
        objective,
        ConstraintSet(1, [BoxFace(0, 1, 0.0)]),
        domain,
        ProblemMetadata(L_f=L_f, L_g=1.0, G_f=objective.gradient_bound(domain), G_g=1.0, lam=2.0),
        interior_point=np.array([-1.0]),
        name="toy_quadratic",
    )


# --------------------------------------------------------------------------
# CSV traces


def _fmt(x: float) -> str:
    return "%.17g" % x


def trace_rows(result: SolverResult) -> list[list[str]]:
    return [
        [
            str(r.iteration),
            str(r.cumulative_constraint_checks),
            _fmt(r.objective_of_projected_average),
            _fmt(r.max_violation_of_average),
            str(r.k_f),
            str(r.k_g),
            str(r.k_p),
            _fmt(r.p_entropy),
            str(r.elapsed_ns),
        ]
        for r in result.trace
    ]


def _write_csv(path: Path, header, rows) -> None:
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as exc:
        raise OSError(f"cannot write trace file {path}: {exc}") from exc


def write_trace(path: str | os.PathLike, result: SolverResult) -> None:
    _write_csv(Path(path), CSV_HEADER, trace_rows(result))


def read_trace(path: str | os.PathLike) -> list[dict]:
    """Parse a run CSV back into typed rows."""
    ints = {"iteration", "checks", "k_f", "k_g", "k_p", "elapsed_ns"}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [{k: int(v) if k in ints else float(v) for k, v in row.items()} for row in reader]


# --------------------------------------------------------------------------
# Experiments


@dataclass
class ExperimentPlan:
    problem: GeneratorSpec
    runs: list[tuple[SolverConfig, str]]
    repetitions: int = 1
    output_path: str | os.PathLike = "results"
    jobs: int = 1

    def __post_init__(self) -> None:
        labels = [label for _, label in self.runs]
        if not labels:
            raise ValueError("an experiment needs at least one run")
        if len(set(labels)) != len(labels):
            raise ValueError("run labels must be unique")
        for label in labels:
            if not label or any(c in label for c in "/\\"):
                raise ValueError(f"invalid label {label!r}")
        if self.repetitions < 1:
            raise ValueError("repetitions must be at least 1")
        if self.jobs < 1:
            raise ValueError("jobs must be at least 1")


@dataclass
class LabelSummary:
    final_objective: list[float] = field(default_factory=list)
    final_violation: list[float] = field(default_factory=list)
    total_constraint_checks: list[int] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def mean_objective(self) -> float:
        return float(np.mean(self.final_objective))

    @property
    def mean_checks(self) -> float:
        return float(np.mean(self.total_constraint_checks))


@dataclass
class ExperimentSummary:
    labels: dict[str, LabelSummary]
    files: list[Path]
    results: dict[tuple[str, int], SolverResult]


def repetition_seed(base: int, repetition: int) -> int:
    """Seed for repetition ``r``; shared by every label with the same base seed."""
    return int(np.random.SeedSequence([base, repetition]).generate_state(1, np.uint64)[0])


def _run_one(problem: Problem, config: SolverConfig) -> SolverResult:
    return solve(problem, config)


def run_experiment(plan: ExperimentPlan) -> ExperimentSummary:
    """Run every (config, repetition) pair on one generated instance and write CSV traces.

    Writes ``{label}_rep{r}.csv`` per run plus ``aggregate.csv`` holding the
    mean over repetitions of every column, keyed on ``(label, iteration)``.
    """
    out = Path(plan.output_path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    problem = generate(plan.problem)
    tasks = [
        (label, r, replace(config, seed=repetition_seed(config.seed, r)))
        for config, label in plan.runs
        for r in range(plan.repetitions)
    ]
    if plan.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=plan.jobs) as pool:
            futures = [pool.submit(_run_one, problem, cfg) for _, _, cfg in tasks]
            outcomes = [f.result() for f in futures]
    else:
        outcomes = [_run_one(problem, cfg) for _, _, cfg in tasks]

    files: list[Path] = []
    results: dict[tuple[str, int], SolverResult] = {}
    labels: dict[str, LabelSummary] = {label: LabelSummary() for _, label in plan.runs}
    for (label, r, _), result in zip(tasks, outcomes):
        path = out / f"{label}_rep{r}.csv"
        write_trace(path, result)
        files.append(path)
        results[(label, r)] = result
        summary = labels[label]
        summary.final_objective.append(result.final_objective)
        summary.final_violation.append(result.final_violation)
        summary.total_constraint_checks.append(result.total_constraint_checks)
        summary.warnings.extend(result.warnings)

    path = out / "aggregate.csv"
    _write_csv(path, ("label",) + CSV_HEADER, _aggregate_rows(plan, results))
    files.append(path)
    return ExperimentSummary(labels, files, results)


def _aggregate_rows(plan: ExperimentPlan, results) -> list[list[str]]:
    rows = []
    for _, label in plan.runs:
        by_iteration: dict[int, list] = {}
        for r in range(plan.repetitions):
            for rec in results[(label, r)].trace:
                by_iteration.setdefault(rec.iteration, []).append(rec)
        for it in sorted(by_iteration):
            recs = by_iteration[it]
            mean = lambda attr: _fmt(float(np.mean([getattr(x, attr) for x in recs])))  # noqa: E731
            rows.append(
                [
                    label,
                    str(it),
                    mean("cumulative_constraint_checks"),
                    mean("objective_of_projected_average"),
                    mean("max_violation_of_average"),
                    mean("k_f"),
                    mean("k_g"),
                    mean("k_p"),
                    mean("p_entropy"),
                    mean("elapsed_ns"),
                ]
            )
    return rows
