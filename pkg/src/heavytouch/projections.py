"""Euclidean projections onto domains, ordering constraints and affine feasible sets."""

from __future__ import annotations

from collections import defaultdict, deque
from functools import lru_cache
from typing import Sequence

import numpy as np

from .core import (
    AnyConstraintSet,
    Ball,
    Box,
    ConstraintSet,
    Domain,
    Problem,
    Vector,
)

DYKSTRA_TOL = 1e-8
DYKSTRA_MAX_SWEEPS = 10**6
EXHAUSTIVE_MAX_ROWS = 16


class ProjectionError(RuntimeError):
    """An iterative projection hit its sweep cap before converging."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


def project_domain(domain: Domain, w: Vector) -> Vector:
    if isinstance(domain, Box):
        return np.minimum(np.maximum(w, domain.lower), domain.upper)
    offset = w - domain.center_point
    norm = float(np.sqrt(offset @ offset))
    if norm <= domain.radius:
        return np.array(w, dtype=float)
    return domain.center_point + offset * (domain.radius / norm)


# --------------------------------------------------------------------------
# Chain ordering projection


class DisjointSetClusters:
    """Union-find over coordinates where each root tracks its cluster's sum and span."""

    def __init__(self, values: Sequence[float]):
        d = len(values)
        self.parent = list(range(d))
        self.rank = [0] * d
        self.cluster_sum = [float(v) for v in values]
        self.cluster_size = [1] * d
        self.left_edge = list(range(d))
        self.right_edge = list(range(d))

    def find(self, i: int) -> int:
        parent = self.parent
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return root

    def union(self, a: int, b: int) -> int:
        """Merge the clusters rooted at ``a`` and ``b`` (``a``'s span left of ``b``'s)."""
        if self.rank[a] < self.rank[b]:
            a, b = b, a
            left, right = self.left_edge[b], self.right_edge[a]
        else:
            left, right = self.left_edge[a], self.right_edge[b]
        self.parent[b] = a
        if self.rank[a] == self.rank[b]:
            self.rank[a] += 1
        self.cluster_sum[a] += self.cluster_sum[b]
        self.cluster_size[a] += self.cluster_size[b]
        self.left_edge[a] = left
        self.right_edge[a] = right
        return a

    def value(self, root: int) -> float:
        return self.cluster_sum[root] / self.cluster_size[root]


class ViolationQueue:
    """FIFO doubly linked list over constraint indices with O(1) membership."""

    _NIL = -1

    def __init__(self, size: int):
        self.next = [self._NIL] * size
        self.prev = [self._NIL] * size
        self.member = [False] * size
        self.head = self._NIL
        self.tail = self._NIL
        self.length = 0

    def __len__(self) -> int:
        return self.length

    def __contains__(self, i: int) -> bool:
        return self.member[i]

    def push(self, i: int) -> None:
        if self.member[i]:
            return
        self.member[i] = True
        self.prev[i] = self.tail
        self.next[i] = self._NIL
        if self.tail == self._NIL:
            self.head = i
        else:
            self.next[self.tail] = i
        self.tail = i
        self.length += 1

    def remove(self, i: int) -> None:
        if not self.member[i]:
            return
        p, n = self.prev[i], self.next[i]
        if p == self._NIL:
            self.head = n
        else:
            self.next[p] = n
        if n == self._NIL:
            self.tail = p
        else:
            self.prev[n] = p
        self.member[i] = False
        self.prev[i] = self.next[i] = self._NIL
        self.length -= 1

    def pop(self) -> int:
        if self.head == self._NIL:
            raise IndexError("pop from empty violation queue")
        i = self.head
        self.remove(i)
        return i

    def items(self) -> list[int]:
        out = []
        i = self.head
        while i != self._NIL:
            out.append(i)
            i = self.next[i]
        return out


def project_ordering(w: Sequence[float], *, return_evaluations: bool = False):
    """Project onto ``{w : w_0 <= w_1 <= ... <= w_{d-1}}``.

    Violated adjacent constraints are merged in FIFO order; after each merge
    only the two constraints on the ends of the merged cluster are
    rechecked. Every coordinate ends at the mean of its cluster.

    Returns the projected vector, and with ``return_evaluations=True`` also the
    number of constraint evaluations performed (at most ``3d``).
    """
    values = np.asarray(w, dtype=float)
    if values.ndim != 1 or values.size == 0:
        raise ValueError("project_ordering needs a non-empty vector")
    d = values.size
    clusters = DisjointSetClusters(values.tolist())
    queue = ViolationQueue(max(d - 1, 0))
    evaluations = d - 1
    for i in range(d - 1):
        if values[i] > values[i + 1]:
            queue.push(i)

    find = clusters.find
    value = clusters.value
    while len(queue):
        i = queue.pop()
        a, b = find(i), find(i + 1)
        root = clusters.union(a, b)
        merged = value(root)
        left, right = clusters.left_edge[root], clusters.right_edge[root]
        if left > 0:
            evaluations += 1
            if value(find(left - 1)) > merged:
                queue.push(left - 1)
        if right < d - 1:
            evaluations += 1
            if merged > value(find(right + 1)):
                queue.push(right)

    out = np.empty(d)
    for i in range(d):
        out[i] = value(find(i))
    if return_evaluations:
        return out, evaluations
    return out


# --------------------------------------------------------------------------
# Dykstra over blocks of affine halfspaces


class _Block:
    """Rows with pairwise disjoint supports; projecting onto all of them at once is exact."""

    def __init__(self, A: np.ndarray, b: np.ndarray):
        self.A = A
        self.b = b
        self.norm2 = np.einsum("ij,ij->i", A, A)

    def project(self, y: Vector) -> Vector:
        excess = self.A @ y - self.b
        np.maximum(excess, 0.0, out=excess)
        if not excess.any():
            return y.copy()
        return y - self.A.T @ (excess / self.norm2)


def _color_rows(A: np.ndarray, b: np.ndarray) -> list[_Block]:
    """Greedily pack rows into blocks of mutually disjoint support."""
    used: list[set[int]] = []
    members: list[list[int]] = []
    for r in range(A.shape[0]):
        support = set(np.flatnonzero(A[r]).tolist())
        for k, u in enumerate(used):
            if not (u & support):
                u |= support
                members[k].append(r)
                break
        else:
            used.append(set(support))
            members.append([r])
    return [_Block(A[rows], b[rows]) for rows in members]


def _dykstra(
    x0: Vector,
    blocks: list[_Block],
    A: np.ndarray,
    b: np.ndarray,
    domain: Domain | None,
    tol: float,
    max_sweeps: int,
) -> Vector:
    x = np.array(x0, dtype=float)
    n_sets = len(blocks) + (domain is not None)
    increments = [np.zeros_like(x) for _ in range(n_sets)]
    residual = np.inf
    for _ in range(max_sweeps):
        # x can sit still for a sweep while the corrections keep moving, so
        # convergence needs both to settle
        change = 0.0
        for k, block in enumerate(blocks):
            y = x + increments[k]
            x = block.project(y)
            new = y - x
            change = max(change, float(np.max(np.abs(new - increments[k]))))
            increments[k] = new
        if domain is not None:
            y = x + increments[-1]
            x = project_domain(domain, y)
            new = y - x
            change = max(change, float(np.max(np.abs(new - increments[-1]))))
            increments[-1] = new
        violation = float(np.max(A @ x - b)) if A.shape[0] else 0.0
        if domain is not None and isinstance(domain, Ball):
            violation = max(violation, float(np.linalg.norm(x - domain.center_point)) - domain.radius)
        residual = max(violation, change)
        if residual <= tol:
            return x
    raise ProjectionError(f"Dykstra did not converge in {max_sweeps} sweeps", residual)


def _pair_rows(pairs: Sequence[tuple[int, int]], d: int) -> tuple[np.ndarray, np.ndarray]:
    A = np.zeros((len(pairs), d))
    for r, (i, j) in enumerate(pairs):
        A[r, i] += 1.0
        A[r, j] -= 1.0
    return A, np.zeros(len(pairs))


def _check_acyclic(pairs: Sequence[tuple[int, int]], d: int) -> None:
    out_edges: dict[int, list[int]] = defaultdict(list)
    indegree = [0] * d
    for i, j in pairs:
        if not (0 <= i < d and 0 <= j < d):
            raise ValueError(f"pair ({i}, {j}) out of range for d={d}")
        if i == j:
            raise ValueError(f"pair ({i}, {j}) is a self-loop")
        out_edges[i].append(j)
        indegree[j] += 1
    ready = deque(v for v in range(d) if indegree[v] == 0)
    seen = 0
    while ready:
        v = ready.popleft()
        seen += 1
        for u in out_edges[v]:
            indegree[u] -= 1
            if indegree[u] == 0:
                ready.append(u)
    if seen != d:
        raise ValueError("ordering pairs contain a cycle")


def _paths(pairs: Sequence[tuple[int, int]], d: int) -> list[list[int]] | None:
    """Decompose an acyclic pair graph into vertex-disjoint paths, or None if it is not one."""
    succ = [-1] * d
    has_pred = [False] * d
    for i, j in pairs:
        if succ[i] != -1 or has_pred[j]:
            return None
        succ[i] = j
        has_pred[j] = True
    paths = []
    for v in range(d):
        if not has_pred[v] and succ[v] != -1:
            path = [v]
            while succ[path[-1]] != -1:
                path.append(succ[path[-1]])
            paths.append(path)
    return paths


def project_ordering_general(
    pairs: Sequence[tuple[int, int]],
    w: Vector,
    tol: float = DYKSTRA_TOL,
    max_sweeps: int = DYKSTRA_MAX_SWEEPS,
) -> Vector:
    """Project onto ``{w : w_i <= w_j for every (i, j) in pairs}``.

    Pair sets that split into disjoint chains are solved exactly with
    :func:`project_ordering`; anything else runs Dykstra's method over blocks
    of non-overlapping pairs, each block averaging its violated pairs.
    """
    w = np.asarray(w, dtype=float)
    d = w.shape[0]
    pairs = [(int(i), int(j)) for i, j in pairs]
    _check_acyclic(pairs, d)
    if not pairs:
        return w.copy()
    paths = _paths(pairs, d)
    if paths is not None:
        out = w.copy()
        for path in paths:
            out[path] = project_ordering(w[path])
        return out
    A, b = _pair_rows(pairs, d)
    return _dykstra(w, _color_rows(A, b), A, b, None, tol, max_sweeps)


def project_feasible(
    problem: Problem,
    w: Vector,
    tol: float = DYKSTRA_TOL,
    max_sweeps: int = DYKSTRA_MAX_SWEEPS,
) -> Vector:
    """Projection onto ``{w in W : g(w) <= 0}``, dispatched on the constraint structure."""
    cs = problem.constraints
    domain = problem.domain
    w = np.asarray(w, dtype=float)
    pairs = cs.pairs()
    if pairs is not None and (isinstance(domain, Box) and domain.is_uniform):
        # clipping a monotone vector to uniform bounds stays monotone and optimal
        z = project_domain(domain, project_ordering_general(pairs, w, tol, max_sweeps))
        if cs.max_violation(z) <= tol:
            return z
    A = cs.matrix.toarray()
    b = cs.offsets
    x = _dykstra(w, _color_rows(A, b), A, b, domain, tol, max_sweeps)
    return project_domain(domain, x)


# --------------------------------------------------------------------------
# Test oracle


def _domain_rows(domain: Domain | None, d: int) -> tuple[np.ndarray, np.ndarray]:
    if domain is None:
        return np.zeros((0, d)), np.zeros(0)
    if isinstance(domain, Box):
        eye = np.eye(d)
        return np.vstack([eye, -eye]), np.concatenate([domain.upper, -domain.lower])
    raise ValueError("exhaustive oracle supports only box domains")


@lru_cache(maxsize=64)
def _face_tables(key: bytes, m: int, d: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """For every active subset S: padded multiplier maps and the consistency flag."""
    Ab = np.frombuffer(key, dtype=float).reshape(m, d + 1)
    A, b = Ab[:, :d], Ab[:, d]
    n_sub = 1 << m
    G = np.zeros((n_sub, m, d))
    H = np.zeros((n_sub, m))
    for mask in range(n_sub):
        rows = [r for r in range(m) if mask >> r & 1]
        if not rows:
            continue
        A_S = A[rows]
        K = np.linalg.pinv(A_S @ A_S.T)
        G[mask, rows] = K @ A_S
        H[mask, rows] = K @ b[rows]
    masks = (np.arange(n_sub)[:, None] >> np.arange(m)[None, :]) & 1
    return G, H, masks.astype(bool)


def oracle_project(
    cs: AnyConstraintSet | None,
    domain: Domain | None,
    w: Vector,
    mode: str = "exhaustive",
    tol: float = 1e-10,
    max_sweeps: int = DYKSTRA_MAX_SWEEPS,
    rows: tuple[np.ndarray, np.ndarray] | None = None,
) -> Vector:
    """Reference projection for tests, independent of the production paths.

    ``exhaustive`` enumerates every active set, projects onto its affine hull
    and keeps the nearest candidate that is feasible with nonnegative
    multipliers. ``iterative`` runs plain cyclic Dykstra, one halfspace at a
    time. Constraints may be given as a constraint set or as raw ``(A, b)``.
    """
    w = np.asarray(w, dtype=float)
    d = w.shape[0]
    if rows is not None:
        A, b = (np.asarray(rows[0], dtype=float).reshape(-1, d), np.asarray(rows[1], dtype=float))
    elif cs is not None:
        base = cs if isinstance(cs, ConstraintSet) else cs.base
        A, b = base.matrix.toarray(), base.offsets
    else:
        A, b = np.zeros((0, d)), np.zeros(0)

    if mode == "iterative":
        singles = [_Block(A[r : r + 1], b[r : r + 1]) for r in range(A.shape[0])]
        return _dykstra(w, singles, A, b, domain, tol, max_sweeps)
    if mode != "exhaustive":
        raise ValueError(f"unknown oracle mode {mode!r}")

    Ad, bd = _domain_rows(domain, d)
    A = np.vstack([A, Ad])
    b = np.concatenate([b, bd])
    m = A.shape[0]
    if m == 0:
        return w.copy()
    if m > EXHAUSTIVE_MAX_ROWS:
        raise ValueError(f"exhaustive oracle supports at most {EXHAUSTIVE_MAX_ROWS} rows, got {m}")
    key = np.ascontiguousarray(np.hstack([A, b[:, None]])).tobytes()
    G, H, masks = _face_tables(key, m, d)
    nu = G @ w - H
    X = w[None, :] - nu @ A
    slack = X @ A.T - b
    scale = 1.0 + np.abs(w).max()
    feasible = np.all(slack <= 1e-9 * scale, axis=1)
    on_face = np.all(np.where(masks, np.abs(slack) <= 1e-9 * scale, True), axis=1)
    signs = np.all(nu >= -1e-9 * scale, axis=1)
    ok = feasible & on_face & signs
    if not ok.any():
        raise ProjectionError("no active set satisfied the optimality conditions", float("nan"))
    dist = np.sum((X - w) ** 2, axis=1)
    dist[~ok] = np.inf
    return X[int(np.argmin(dist))]
