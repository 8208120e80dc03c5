"""Problem model: domains, constraint sets, objective oracles and penalty scaling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence, Union

import numpy as np
import numpy.typing as npt
from scipy import sparse

Vector = npt.NDArray[np.float64]

GAMMA_SAFETY = 1.01


class DimensionError(ValueError):
    """A vector does not match the dimension of the problem."""


class InfeasiblePointError(ValueError):
    """A point that was required to be strictly feasible is not."""


def _check_dim(w: Vector, d: int) -> None:
    if w.ndim != 1 or w.shape[0] != d:
        raise DimensionError(f"expected a vector of length {d}, got shape {w.shape}")


class CheckCounter:
    """Per-run tally of single-constraint evaluations."""

    __slots__ = ("count",)

    def __init__(self) -> None:
        self.count = 0

    def add(self, n: int) -> None:
        self.count += n


# --------------------------------------------------------------------------
# Domains


@dataclass(frozen=True)
class Box:
    lower: Vector
    upper: Vector
    diameter: float | None = None

    def __post_init__(self) -> None:
        lower = np.asarray(self.lower, dtype=float)
        upper = np.asarray(self.upper, dtype=float)
        if lower.shape != upper.shape or lower.ndim != 1:
            raise ValueError("box bounds must be vectors of equal length")
        if not np.all(lower < upper):
            raise ValueError("box requires lower < upper in every coordinate")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        natural = max(1.0, float(np.linalg.norm(upper - lower)))
        if self.diameter is not None and self.diameter < natural:
            raise ValueError(f"diameter bound {self.diameter} is below {natural}")

    @classmethod
    def cube(cls, d: int, lo: float, hi: float) -> "Box":
        return cls(np.full(d, float(lo)), np.full(d, float(hi)))

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def diameter_bound(self) -> float:
        if self.diameter is not None:
            return float(self.diameter)
        return max(1.0, float(np.linalg.norm(self.upper - self.lower)))

    @property
    def is_uniform(self) -> bool:
        return bool(np.all(self.lower == self.lower[0]) and np.all(self.upper == self.upper[0]))

    def center(self) -> Vector:
        return 0.5 * (self.lower + self.upper)

    def contains(self, w: Vector, tol: float = 0.0) -> bool:
        return bool(np.all(w >= self.lower - tol) and np.all(w <= self.upper + tol))


@dataclass(frozen=True)
class Ball:
    center_point: Vector
    radius: float
    diameter: float | None = None

    def __post_init__(self) -> None:
        c = np.asarray(self.center_point, dtype=float)
        if c.ndim != 1:
            raise ValueError("ball center must be a vector")
        if not self.radius > 0:
            raise ValueError("ball radius must be positive")
        object.__setattr__(self, "center_point", c)
        natural = max(1.0, 2.0 * self.radius)
        if self.diameter is not None and self.diameter < natural:
            raise ValueError(f"diameter bound {self.diameter} is below {natural}")

    @property
    def dim(self) -> int:
        return self.center_point.shape[0]

    @property
    def diameter_bound(self) -> float:
        if self.diameter is not None:
            return float(self.diameter)
        return max(1.0, 2.0 * self.radius)

    def center(self) -> Vector:
        return self.center_point.copy()

    def contains(self, w: Vector, tol: float = 0.0) -> bool:
        return float(np.linalg.norm(w - self.center_point)) <= self.radius + tol


Domain = Union[Box, Ball]


# --------------------------------------------------------------------------
# Constraints
#
# Every supported kind is affine, g_i(w) = <a_i, w> - b_i, so the set is
# compiled to sparse rows once and all evaluations go through them.


@dataclass(frozen=True)
class Ordering:
    """``scale * (w[i] - w[j]) <= 0``, i.e. ``w[i] <= w[j]``."""

    i: int
    j: int
    scale: float = 1.0 / math.sqrt(2.0)


@dataclass(frozen=True)
class LinearRow:
    """``<a, w> - b <= 0``."""

    a: Vector
    b: float


@dataclass(frozen=True)
class BoxFace:
    """``sign * w[i] - bound <= 0``."""

    i: int
    sign: int
    bound: float


ConstraintKind = Union[Ordering, LinearRow, BoxFace]


class ConstraintSet:
    """An indexed family of affine constraints ``g_1 .. g_m`` on R^d.

    Every method that touches a constraint accepts an optional
    :class:`CheckCounter` and charges one check per constraint touched.
    Evaluating a constraint and reading its subgradient together count once.
    """

    def __init__(self, dim: int, kinds: Sequence[ConstraintKind]):
        if dim < 1:
            raise ValueError("dimension must be positive")
        if len(kinds) < 1:
            raise ValueError("a constraint set needs at least one constraint")
        self.dim = int(dim)
        self.kinds: tuple[ConstraintKind, ...] = tuple(kinds)
        rows_idx: list[np.ndarray] = []
        rows_val: list[np.ndarray] = []
        offsets = np.empty(len(self.kinds))
        for r, kind in enumerate(self.kinds):
            idx, val, b = self._compile(kind)
            rows_idx.append(idx)
            rows_val.append(val)
            offsets[r] = b
        self._row_idx = rows_idx
        self._row_val = rows_val
        self.offsets = offsets
        indptr = np.zeros(len(self.kinds) + 1, dtype=np.int64)
        indptr[1:] = np.cumsum([len(i) for i in rows_idx])
        self.matrix = sparse.csr_matrix(
            (np.concatenate(rows_val), np.concatenate(rows_idx), indptr),
            shape=(len(self.kinds), self.dim),
        )
        # dense copy is much faster for the small problems this targets
        self._dense = self.matrix.toarray() if self.count * self.dim <= 4_000_000 else None
        self.row_nnz = np.diff(indptr)

    def _compile(self, kind: ConstraintKind) -> tuple[np.ndarray, np.ndarray, float]:
        d = self.dim
        if isinstance(kind, Ordering):
            if not (0 <= kind.i < d and 0 <= kind.j < d) or kind.i == kind.j:
                raise ValueError(f"ordering pair ({kind.i}, {kind.j}) invalid for d={d}")
            if not kind.scale > 0:
                raise ValueError("ordering scale must be positive")
            return (
                np.array([kind.i, kind.j], dtype=np.int64),
                np.array([kind.scale, -kind.scale]),
                0.0,
            )
        if isinstance(kind, LinearRow):
            a = np.asarray(kind.a, dtype=float)
            if a.shape != (d,):
                raise ValueError(f"linear row has shape {a.shape}, expected ({d},)")
            nz = np.flatnonzero(a)
            if nz.size == 0:
                raise ValueError("linear row must have a nonzero coefficient")
            return nz.astype(np.int64), a[nz].copy(), float(kind.b)
        if isinstance(kind, BoxFace):
            if not 0 <= kind.i < d:
                raise ValueError(f"box face index {kind.i} invalid for d={d}")
            if kind.sign not in (1, -1):
                raise ValueError("box face sign must be +1 or -1")
            return np.array([kind.i], dtype=np.int64), np.array([float(kind.sign)]), float(kind.bound)
        raise TypeError(f"unsupported constraint kind {kind!r}")

    @property
    def count(self) -> int:
        return len(self.kinds)

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """Support indices and coefficients of constraint ``i``."""
        return self._row_idx[i], self._row_val[i]

    def raw_checks(self, i: int) -> int:
        return 1

    def evaluate(self, i: int, w: Vector, counter: CheckCounter | None = None) -> float:
        if counter is not None:
            counter.count += 1
        idx = self._row_idx[i]
        return float(self._row_val[i] @ w[idx]) - self.offsets[i]

    def subgradient(self, i: int, w: Vector, counter: CheckCounter | None = None) -> Vector:
        if counter is not None:
            counter.count += 1
        g = np.zeros(self.dim)
        g[self._row_idx[i]] = self._row_val[i]
        return g

    def value_and_row(
        self, i: int, w: Vector, counter: CheckCounter | None = None
    ) -> tuple[float, np.ndarray, np.ndarray]:
        """Value of ``g_i(w)`` plus the sparse subgradient, for one check."""
        if counter is not None:
            counter.count += 1
        idx = self._row_idx[i]
        val = self._row_val[i]
        return float(val @ w[idx]) - self.offsets[i], idx, val

    def evaluate_all(self, w: Vector, counter: CheckCounter | None = None) -> Vector:
        if counter is not None:
            counter.count += self.count
        if self._dense is not None:
            return self._dense @ w - self.offsets
        return self.matrix @ w - self.offsets

    def evaluate_subset(
        self, indices: np.ndarray, w: Vector, counter: CheckCounter | None = None
    ) -> Vector:
        if counter is not None:
            counter.count += len(indices)
        if len(indices) == 1:
            i = indices[0]
            return np.array([self._row_val[i] @ w[self._row_idx[i]] - self.offsets[i]])
        if self._dense is not None:
            return self._dense[indices] @ w - self.offsets[indices]
        return self.matrix[indices] @ w - self.offsets[indices]

    def max_violation(self, w: Vector) -> float:
        """``max(0, g(w))`` without charging any checks."""
        return max(0.0, float(np.max(self.evaluate_all(w))))

    def pairs(self) -> list[tuple[int, int]] | None:
        """Ordering pairs ``(i, j)`` meaning ``w_i <= w_j``, or None for mixed sets."""
        if all(isinstance(k, Ordering) for k in self.kinds):
            return [(k.i, k.j) for k in self.kinds]  # type: ignore[union-attr]
        return None


class AggregatedConstraintSet:
    """Group-max constraints ``g~_i(w) = max_{j in M_i} g_j(w)``.

    Each touch of an aggregated constraint charges ``|M_i|`` raw checks.
    """

    def __init__(self, base: ConstraintSet, groups: Sequence[Sequence[int]]):
        seen = np.concatenate([np.asarray(g, dtype=np.int64) for g in groups])
        if np.sort(seen).tolist() != list(range(base.count)):
            raise ValueError("groups must partition the constraint indices")
        self.base = base
        self.dim = base.dim
        self.groups = [np.asarray(g, dtype=np.int64) for g in groups]
        self.group_sizes = np.array([len(g) for g in self.groups], dtype=np.int64)
        contiguous = seen.tolist() == list(range(base.count)) and all(
            np.all(np.diff(g) == 1) for g in self.groups
        )
        self._starts = np.cumsum(np.concatenate([[0], self.group_sizes[:-1]])) if contiguous else None
        self.row_nnz = np.array([int(base.row_nnz[g].sum()) for g in self.groups])

    @property
    def count(self) -> int:
        return len(self.groups)

    def raw_checks(self, i: int) -> int:
        return int(self.group_sizes[i])

    def _argmax_row(self, i: int, w: Vector, counter: CheckCounter | None) -> tuple[float, int]:
        group = self.groups[i]
        vals = self.base.evaluate_subset(group, w, counter)
        a = int(np.argmax(vals))
        return float(vals[a]), int(group[a])

    def evaluate(self, i: int, w: Vector, counter: CheckCounter | None = None) -> float:
        return self._argmax_row(i, w, counter)[0]

    def subgradient(self, i: int, w: Vector, counter: CheckCounter | None = None) -> Vector:
        _, j = self._argmax_row(i, w, counter)
        return self.base.subgradient(j, w)

    def value_and_row(
        self, i: int, w: Vector, counter: CheckCounter | None = None
    ) -> tuple[float, np.ndarray, np.ndarray]:
        value, j = self._argmax_row(i, w, counter)
        idx, val = self.base.row(j)
        return value, idx, val

    def evaluate_all(self, w: Vector, counter: CheckCounter | None = None) -> Vector:
        vals = self.base.evaluate_all(w, counter)
        if self._starts is not None:
            return np.maximum.reduceat(vals, self._starts)
        return np.array([vals[g].max() for g in self.groups])

    def evaluate_subset(
        self, indices: np.ndarray, w: Vector, counter: CheckCounter | None = None
    ) -> Vector:
        return np.array([self.evaluate(int(i), w, counter) for i in indices])

    def max_violation(self, w: Vector) -> float:
        return self.base.max_violation(w)

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        raise TypeError("aggregated constraints have no fixed row; use value_and_row")


AnyConstraintSet = Union[ConstraintSet, AggregatedConstraintSet]


def aggregate(cs: ConstraintSet, groups: int) -> AggregatedConstraintSet:
    """Partition ``cs`` into at most ``groups`` contiguous blocks of size ``ceil(m / groups)``."""
    m = cs.count
    if groups < 1:
        raise ValueError("number of aggregated constraints must be at least 1")
    if groups > m:
        raise ValueError(f"cannot aggregate {m} constraints into {groups} groups")
    size = -(-m // groups)
    blocks = [list(range(s, min(s + size, m))) for s in range(0, m, size)]
    return AggregatedConstraintSet(cs, blocks)


def eval_max_constraint(
    cs: AnyConstraintSet, w: Vector, counter: CheckCounter | None = None
) -> tuple[float, int]:
    """Return ``(max_i g_i(w), argmax)``; ties resolve to the lowest index."""
    w = np.asarray(w, dtype=float)
    _check_dim(w, cs.dim)
    vals = cs.evaluate_all(w, counter)
    i = int(np.argmax(vals))
    return float(vals[i]), i


# --------------------------------------------------------------------------
# Objectives


class ObjectiveOracle(Protocol):
    """Stochastic first-order access to the objective ``f``."""

    dim: int
    strong_convexity: float
    #: abstract work units charged per stochastic gradient by the virtual clock
    cost_units: int

    def sample_subgradient(self, w: Vector, rng: np.random.Generator) -> Vector: ...

    def full_value(self, w: Vector) -> float: ...

    def full_subgradient(self, w: Vector) -> Vector: ...


class LinearObjective:
    """``f(w) = <c, w>`` with optional bounded uniform gradient noise."""

    def __init__(self, c: Vector, noise: float = 0.0):
        self.c = np.asarray(c, dtype=float)
        self.dim = self.c.shape[0]
        self.noise = float(noise)
        self.strong_convexity = 0.0
        self.cost_units = self.dim

    def sample_subgradient(self, w: Vector, rng: np.random.Generator) -> Vector:
        if self.noise:
            return self.c + rng.uniform(-self.noise, self.noise, self.dim)
        return self.c.copy()

    def full_value(self, w: Vector) -> float:
        return float(self.c @ w)

    def full_subgradient(self, w: Vector) -> Vector:
        return self.c.copy()

    def gradient_bound(self, domain: Domain) -> float:
        return float(np.linalg.norm(np.abs(self.c) + self.noise))


class QuadraticObjective:
    """``f(w) = (curvature / 2) * ||w - target||^2`` with optional uniform noise."""

    def __init__(self, target: Vector, curvature: float, noise: float = 0.0):
        self.target = np.asarray(target, dtype=float)
        self.dim = self.target.shape[0]
        self.curvature = float(curvature)
        self.noise = float(noise)
        self.strong_convexity = self.curvature
        self.cost_units = self.dim

    def sample_subgradient(self, w: Vector, rng: np.random.Generator) -> Vector:
        g = self.curvature * (w - self.target)
        if self.noise:
            g += rng.uniform(-self.noise, self.noise, self.dim)
        return g

    def full_value(self, w: Vector) -> float:
        r = w - self.target
        return 0.5 * self.curvature * float(r @ r)

    def full_subgradient(self, w: Vector) -> Vector:
        return self.curvature * (w - self.target)

    def gradient_bound(self, domain: Domain) -> float:
        return self.curvature * _farthest_distance(domain, self.target) + self.noise * math.sqrt(self.dim)


class LeastSquaresObjective:
    """``f(w) = (1 / 2n) ||X w - y||^2``; each sample uses one uniformly drawn row."""

    def __init__(self, X: np.ndarray, y: Vector):
        self.X = np.asarray(X, dtype=float)
        self.y = np.asarray(y, dtype=float)
        self.n, self.dim = self.X.shape
        if self.n == 0:
            raise ValueError("least squares needs at least one example")
        gram = self.X.T @ self.X / self.n
        self.gram = gram
        self.strong_convexity = max(0.0, float(np.linalg.eigvalsh(gram)[0]))
        self.cost_units = self.dim

    def sample_subgradient(self, w: Vector, rng: np.random.Generator) -> Vector:
        i = rng.integers(self.n)
        x = self.X[i]
        return x * (float(x @ w) - self.y[i])

    def full_value(self, w: Vector) -> float:
        r = self.X @ w - self.y
        return 0.5 * float(r @ r) / self.n

    def full_subgradient(self, w: Vector) -> Vector:
        return self.X.T @ (self.X @ w - self.y) / self.n

    def gradient_bound(self, domain: Domain) -> float:
        # per-example bound: ||x|| * (max_{w in W} |<x, w>| + |y|)
        reach = np.array([_max_abs_inner(domain, x) for x in self.X])
        return float(np.max(np.linalg.norm(self.X, axis=1) * (reach + np.abs(self.y))))

    def lipschitz_bound(self, domain: Domain) -> float:
        return float(
            np.linalg.norm(self.gram, 2) * _farthest_distance(domain, np.zeros(self.dim))
            + np.linalg.norm(self.X.T @ self.y / self.n)
        )


class HingeRankingObjective:
    """Average pairwise hinge loss ``(1/n) sum max(0, 1 - <w, z_i>)``.

    ``Z`` holds the difference vectors ``Phi(x+) - Phi(x-)`` as sparse rows.
    """

    def __init__(self, Z: sparse.spmatrix):
        self.Z = sparse.csr_matrix(Z, dtype=float)
        self.n, self.dim = self.Z.shape
        if self.n == 0:
            raise ValueError("hinge ranking needs at least one example")
        self.strong_convexity = 0.0
        self._indptr = self.Z.indptr
        self._indices = self.Z.indices
        self._data = self.Z.data
        self.row_norms = np.sqrt(np.asarray(self.Z.multiply(self.Z).sum(axis=1)).ravel())
        self.cost_units = max(1, math.ceil(self.Z.nnz / self.n))

    def sample_subgradient(self, w: Vector, rng: np.random.Generator) -> Vector:
        i = rng.integers(self.n)
        s, e = self._indptr[i], self._indptr[i + 1]
        idx = self._indices[s:e]
        val = self._data[s:e]
        g = np.zeros(self.dim)
        if float(val @ w[idx]) < 1.0:
            g[idx] = -val
        return g

    def full_value(self, w: Vector) -> float:
        margins = self.Z @ w
        return float(np.mean(np.maximum(0.0, 1.0 - margins)))

    def full_subgradient(self, w: Vector) -> Vector:
        active = (self.Z @ w) < 1.0
        return -np.asarray(self.Z[active].sum(axis=0)).ravel() / self.n

    def gradient_bound(self, domain: Domain) -> float:
        return float(self.row_norms.max())

    def lipschitz_bound(self, domain: Domain) -> float:
        return float(self.row_norms.mean())


def _farthest_distance(domain: Domain, point: Vector) -> float:
    if isinstance(domain, Box):
        far = np.maximum(np.abs(domain.lower - point), np.abs(domain.upper - point))
        return float(np.linalg.norm(far))
    return float(np.linalg.norm(domain.center_point - point)) + domain.radius


def _max_abs_inner(domain: Domain, x: Vector) -> float:
    if isinstance(domain, Box):
        return float(np.abs(x) @ np.maximum(np.abs(domain.lower), np.abs(domain.upper)))
    return abs(float(x @ domain.center_point)) + domain.radius * float(np.linalg.norm(x))


# --------------------------------------------------------------------------
# Problems and penalty scaling


@dataclass(frozen=True)
class ProblemMetadata:
    L_f: float
    L_g: float
    G_f: float
    G_g: float
    lam: float = 0.0

    def __post_init__(self) -> None:
        for name in ("L_f", "L_g", "G_f", "G_g", "lam"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"metadata {name} must be finite and nonnegative, got {v}")


@dataclass(frozen=True)
class BoxFamily:
    d: int


@dataclass(frozen=True)
class OrderingFamily:
    d: int


@dataclass(frozen=True)
class LinearRowsFamily:
    r: float
    b_min: float


GammaFamily = Union[BoxFamily, OrderingFamily, LinearRowsFamily]


@dataclass(frozen=True)
class GammaEstimate:
    """Boundary-gradient bound ``rho`` and the penalty scale derived from it.

    ``provenance`` is one of ``"lemma_gamma"`` (from a strictly feasible
    point), ``"known_family"`` or ``"user_supplied"``; ``source`` holds the
    interior point or the family descriptor.
    """

    rho: float
    gamma: float
    provenance: str
    source: object = None


@dataclass
class Problem:
    objective: ObjectiveOracle
    constraints: ConstraintSet
    domain: Domain
    metadata: ProblemMetadata
    interior_point: Vector | None = None
    family: GammaFamily | None = None
    initial_point: Vector | None = None
    name: str = "problem"
    extras: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        d = self.domain.dim
        if self.constraints.dim != d or self.objective.dim != d:
            raise DimensionError("objective, constraints and domain disagree on dimension")

    @property
    def dim(self) -> int:
        return self.domain.dim

    def start(self) -> Vector:
        if self.initial_point is not None:
            return np.array(self.initial_point, dtype=float)
        return self.domain.center()

    def gamma_estimate(self) -> GammaEstimate | None:
        """Default penalty scale: known family first, then the interior point."""
        if self.family is not None:
            return gamma_for_known_family(self.family, self.metadata.L_f)
        if self.interior_point is not None:
            return gamma_from_interior_point(self, self.interior_point)
        return None


def penalized_objective(problem: Problem, gamma: float, w: Vector) -> float:
    """``f(w) + gamma * max(0, g(w))`` using the deterministic objective value."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    w = np.asarray(w, dtype=float)
    _check_dim(w, problem.dim)
    return problem.objective.full_value(w) + gamma * problem.constraints.max_violation(w)


def rho_from_interior_point(cs: AnyConstraintSet, domain: Domain, v: Vector) -> float:
    """``-g(v) / D_w`` for a strictly feasible ``v``."""
    v = np.asarray(v, dtype=float)
    _check_dim(v, cs.dim)
    g = float(np.max(cs.evaluate_all(v)))
    if g >= 0:
        raise InfeasiblePointError(f"point is not strictly feasible: g(v) = {g}")
    return -g / domain.diameter_bound


def gamma_from_interior_point(
    problem: Problem, v: Vector, safety: float = GAMMA_SAFETY
) -> GammaEstimate:
    rho = rho_from_interior_point(problem.constraints, problem.domain, v)
    return GammaEstimate(rho, safety * problem.metadata.L_f / rho, "lemma_gamma", np.asarray(v))


def gamma_for_known_family(
    family: GammaFamily, L_f: float, safety: float = GAMMA_SAFETY
) -> GammaEstimate:
    """Closed-form ``rho`` for box, chain-ordering and normalized linear constraints.

    Box faces on ``[-1, 1]^d`` give ``rho = 1/sqrt(d)``; a chain of ``d - 1``
    ordering constraints gives ``rho = 1/(d - 1)``; unit-norm rows ``Aw <= b``
    on a radius-``r`` ball give ``rho = b_min / 2r``.
    """
    if isinstance(family, BoxFamily):
        if family.d < 1:
            raise ValueError("box family needs d >= 1")
        rho = 1.0 / math.sqrt(family.d)
    elif isinstance(family, OrderingFamily):
        if family.d < 2:
            raise ValueError("ordering family needs d >= 2")
        rho = 1.0 / (family.d - 1)
    elif isinstance(family, LinearRowsFamily):
        if not (family.r > 0 and family.b_min > 0):
            raise ValueError("linear family needs r > 0 and b_min > 0")
        rho = family.b_min / (2.0 * family.r)
    else:
        raise TypeError(f"unknown constraint family {family!r}")
    return GammaEstimate(rho, safety * L_f / rho, "known_family", family)


def user_gamma(gamma: float, rho: float = float("nan")) -> GammaEstimate:
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    return GammaEstimate(rho, float(gamma), "user_supplied", None)
