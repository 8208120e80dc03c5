"""Automatic minibatch sizing from online variance and cost estimates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

COST_FLOOR_NS = 1.0
WARMUP_ITERATIONS = 10


@dataclass
class WeightedAverage:
    """Exponentially weighted mean ``avg <- (x + nu * W * avg) / (1 + nu * W)``.

    ``W`` is the running geometric weight sum, so ``nu = 1`` is a plain mean.
    """

    nu: float = 0.999
    value: float = 0.0
    weight: float = 0.0
    samples: int = 0

    def add(self, x: float) -> None:
        decayed = self.nu * self.weight
        self.weight = 1.0 + decayed
        self.value = (x + decayed * self.value) / self.weight
        self.samples += 1


@dataclass
class RunningMean:
    value: float = 0.0
    samples: int = 0

    def add(self, x: float) -> None:
        self.samples += 1
        self.value += (x - self.value) / self.samples


def trace_variance(samples: np.ndarray) -> float:
    """Unbiased trace of the sample covariance, ``sum_j ||x_j - xbar||^2 / (k - 1)``."""
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    k = x.shape[0]
    if k < 2:
        raise ValueError("need at least two samples to estimate a variance")
    centered = x - x.mean(axis=0)
    return float(np.sum(centered * centered)) / (k - 1)


@dataclass
class EstimatorState:
    """Variance and per-sample cost estimates for the three gradient components."""

    nu: float = 0.999
    v_f: WeightedAverage = field(init=False)
    v_g: WeightedAverage = field(init=False)
    v_p: WeightedAverage = field(init=False)
    c_f: RunningMean = field(default_factory=RunningMean)
    c_g: RunningMean = field(default_factory=RunningMean)
    c_p: RunningMean = field(default_factory=RunningMean)

    def __post_init__(self) -> None:
        if not 0 < self.nu <= 1:
            raise ValueError("decay nu must lie in (0, 1]")
        self.v_f = WeightedAverage(self.nu)
        self.v_g = WeightedAverage(self.nu)
        self.v_p = WeightedAverage(self.nu)

    def observe_f(self, samples: np.ndarray, cost_ns: float) -> None:
        self.v_f.add(trace_variance(samples))
        self.c_f.add(max(cost_ns / len(samples), COST_FLOOR_NS))

    def observe_g(self, samples: np.ndarray, cost_ns: float) -> None:
        self.v_g.add(trace_variance(samples))
        self.c_g.add(max(cost_ns / len(samples), COST_FLOOR_NS))

    def observe_p(
        self, mu_diffs: np.ndarray, gamma: float, m: int, k_p: int, cost_ns: float
    ) -> None:
        self.v_p.add(p_variance(mu_diffs, gamma, m, k_p))
        self.c_p.add(max(cost_ns / k_p, COST_FLOOR_NS))


def p_variance(mu_diffs: np.ndarray, gamma: float, m: int, k_p: int) -> float:
    """Crude single-sample variance of the centered p-supergradient.

    ``gamma^2 m^2 (1/k_p) sum_i (mu_i - max(0, g_i(w)))^2``.
    """
    if k_p < 1:
        raise ValueError("k_p must be at least 1")
    diffs = np.asarray(mu_diffs, dtype=float)
    return gamma * gamma * m * m * float(diffs @ diffs) / k_p


def allocate(
    variances: tuple[float, float, float],
    costs: tuple[float, float, float],
    eta_w: float,
    eta_p: float,
    m: int | None = None,
) -> tuple[int, int, int]:
    """Minibatch sizes ``(k_f, k_g, k_p)`` minimizing bound impact for a budget fixing ``k_f = 2``.

    Sizes are proportional to ``sqrt(eta * v / c)``, rounded to the nearest
    integer, with ``k_g >= 2`` and ``1 <= k_p <= m``. ``k_g`` is capped at
    ``max(2, m)``: past that, checking every constraint is cheaper.
    """
    v_f, v_g, v_p = variances
    c_f, c_g, c_p = costs
    for c in costs:
        if not (c > 0 and math.isfinite(c)):
            raise ValueError(f"costs must be positive and finite, got {costs}")
    for v in variances:
        if not (v >= 0 and math.isfinite(v)):
            raise ValueError(f"variances must be nonnegative and finite, got {variances}")
    cap_g = max(2, m) if m is not None else None
    cap_p = m
    raw_f = math.sqrt(eta_w * v_f / c_f)
    raw_g = math.sqrt(eta_w * v_g / c_g)
    raw_p = math.sqrt(eta_p * v_p / c_p)
    if raw_f == 0.0:
        # k_f = 2 would need an infinite budget: everything else saturates
        k_g = (cap_g if cap_g is not None else 2) if raw_g > 0 else 2
        k_p = (cap_p if cap_p is not None else 1) if raw_p > 0 else 1
        return 2, k_g, k_p
    scale = 2.0 / raw_f
    k_g = max(2, _round_half_up(scale * raw_g))
    k_p = max(1, _round_half_up(scale * raw_p))
    if cap_g is not None:
        k_g = min(k_g, cap_g)
    if cap_p is not None:
        k_p = min(k_p, cap_p)
    return 2, k_g, k_p


def _round_half_up(x: float) -> int:
    if x > 2**62:
        return 2**62
    return int(math.floor(x + 0.5))


def allocate_from(state: EstimatorState, eta_w: float, eta_p: float, m: int) -> tuple[int, int, int]:
    return allocate(
        (state.v_f.value, state.v_g.value, state.v_p.value),
        (state.c_f.value, state.c_g.value, state.c_p.value),
        eta_w,
        eta_p,
        m,
    )


def warmup_sizes(m: int) -> tuple[int, int, int]:
    return 2, 2, min(m, 8)
