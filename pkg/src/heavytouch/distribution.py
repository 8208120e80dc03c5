"""The learned distribution over constraints and its variance-reduced updates."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import AnyConstraintSet, CheckCounter, Vector


def default_floor(m: int) -> float:
    return 1e-12 / m


@dataclass
class SamplingState:
    """Multinoulli ``p`` over constraints plus remembered positive parts ``mu``.

    ``last_update[j]`` is the iteration at which ``mu[j]`` was last refreshed.
    Probabilities are kept as log-weights and never drop below ``p_floor``.
    """

    p: Vector
    log_p: Vector
    mu: Vector
    last_update: np.ndarray
    p_floor: float
    max_staleness_seen: int = 0
    cdf: Vector | None = None

    @classmethod
    def uniform(cls, m: int, mu: Vector | None = None, start: int = 0) -> "SamplingState":
        if m < 1:
            raise ValueError("need at least one constraint")
        p = np.full(m, 1.0 / m)
        mu = np.zeros(m) if mu is None else np.maximum(np.asarray(mu, dtype=float), 0.0)
        return cls(
            p=p,
            log_p=np.log(p),
            mu=mu,
            last_update=np.full(m, start, dtype=np.int64),
            p_floor=default_floor(m),
            cdf=np.cumsum(p),
        )

    @property
    def m(self) -> int:
        return self.p.shape[0]

    def entropy(self) -> float:
        # + 0.0 turns the -0.0 of a point mass into 0.0
        return float(-(self.p @ self.log_p)) + 0.0


def sample_constraint(state: SamplingState, rng: np.random.Generator) -> int:
    """Draw ``i ~ p`` by inverse CDF."""
    m = state.p.shape[0]
    if m == 1:
        return 0
    cdf = state.cdf
    if cdf is None:
        cdf = state.cdf = np.cumsum(state.p)
    i = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return i if i < m else m - 1


def sample_without_replacement(m: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform ``k``-subset of ``range(m)``."""
    if not 1 <= k <= m:
        raise ValueError(f"subset size must satisfy 1 <= k <= m, got k={k}, m={m}")
    if k == m:
        return np.arange(m)
    if k == 1:
        return np.array([rng.integers(m)])
    return rng.choice(m, size=k, replace=False)


@dataclass
class PSupergradient:
    """Sparse-plus-dense supergradient ``gamma * mu_old + sum_j corr_j e_j``.

    ``mu_ref`` is the state's live ``mu`` array, already refreshed on
    ``indices``; ``previous`` keeps the pre-refresh values there so the dense
    part can be reconstructed without copying the whole vector.
    """

    gamma: float
    mu_ref: Vector
    indices: np.ndarray
    previous: Vector
    corrections: Vector

    def dense(self) -> Vector:
        mu_old = self.mu_ref.copy()
        mu_old[self.indices] = self.previous
        return self.gamma * mu_old

    def total(self) -> Vector:
        out = self.dense()
        np.add.at(out, self.indices, self.corrections)
        return out


def centered_supergradient(
    state: SamplingState,
    cs: AnyConstraintSet,
    w: Vector,
    subset: np.ndarray,
    gamma: float,
    t: int = 0,
    counter: CheckCounter | None = None,
) -> PSupergradient:
    """SVRG-style estimate of ``gamma * max(0, g(w))``, then refresh ``mu`` on ``subset``."""
    m = state.p.shape[0]
    k = len(subset)
    if k == 0:
        raise ValueError("subset must be nonempty")
    positive = np.maximum(cs.evaluate_subset(subset, w, counter), 0.0)
    previous = state.mu[subset]
    corrections = (gamma * m / k) * (positive - previous)

    staleness = t - (int(state.last_update[0]) if m == 1 else int(state.last_update.min()))
    if staleness > state.max_staleness_seen:
        state.max_staleness_seen = staleness
    state.mu[subset] = positive
    state.last_update[subset] = t
    return PSupergradient(gamma, state.mu, subset, previous, corrections)


def multiplicative_update(state: SamplingState, grad: PSupergradient, eta_p: float) -> None:
    """``p <- p * exp(eta_p * grad)`` normalized, computed on log-weights."""
    if not eta_p > 0:
        raise ValueError("eta_p must be positive")
    m = state.p.shape[0]
    if m == 1:
        # p is pinned to [1]
        return
    if not (np.isfinite(grad.corrections).all() and math.isfinite(grad.gamma)):
        raise FloatingPointError("non-finite supergradient entry")
    log_w = state.log_p + (eta_p * grad.gamma) * grad.mu_ref
    log_w[grad.indices] += eta_p * (grad.gamma * (grad.previous - grad.mu_ref[grad.indices]))
    np.add.at(log_w, grad.indices, eta_p * grad.corrections)
    _set_from_log_weights(state, log_w)


def _set_from_log_weights(state: SamplingState, log_w: Vector) -> None:
    m = log_w.shape[0]
    log_w -= log_w.max()
    p = np.exp(log_w)
    p /= p.sum()
    # mixing with the uniform floor keeps sum(p) == 1 and min(p) >= p_floor together
    p *= 1.0 - m * state.p_floor
    p += state.p_floor
    state.p = p
    state.log_p = np.log(p)
    state.cdf = np.cumsum(p)


def staleness_bound(m: int, k: int, T: int, delta: float) -> float:
    """High-probability bound ``1 + (2m/k) ln(2mT/delta)`` on how long any ``mu_j`` goes stale."""
    if not (m > 0 and k > 0 and T > 0 and 0 < delta < 1):
        raise ValueError("staleness bound needs positive m, k, T and delta in (0, 1)")
    return 1.0 + (2.0 * m / k) * math.log(2.0 * m * T / delta)


def simulate_max_staleness(
    m: int, k: int, T: int, runs: int, rng: np.random.Generator
) -> np.ndarray:
    """Max over ``t <= T`` and ``j`` of ``t - s_j`` for ``runs`` independent refresh processes.

    ``s`` starts at zero; at step ``t`` a uniform ``k``-subset is refreshed to ``t``.
    """
    s = np.zeros((runs, m), dtype=np.int64)
    worst = np.zeros(runs, dtype=np.int64)
    rows = np.arange(runs)[:, None]
    for t in range(1, T + 1):
        np.maximum(worst, t - s.min(axis=1), out=worst)
        chosen = np.argpartition(rng.random((runs, m)), k - 1, axis=1)[:, :k]
        s[rows, chosen] = t
    return worst
