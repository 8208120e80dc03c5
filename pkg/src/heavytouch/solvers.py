"""Training loops: FullTouch, LightTouch, MidTouch, practical LightTouch and projected SGD."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autotune
from .core import (
    AnyConstraintSet,
    CheckCounter,
    Domain,
    GammaEstimate,
    Problem,
    Vector,
    aggregate,
    user_gamma,
)
from .distribution import (
    SamplingState,
    centered_supergradient,
    multiplicative_update,
    sample_constraint,
    sample_without_replacement,
)
from .projections import project_domain, project_feasible

ALGORITHMS = ("full", "light", "mid", "practical", "projected_sgd")
SCHEDULES = ("constant", "inv_sqrt", "inv_t")
CLOCKS = ("virtual", "wall")


class NonFiniteIterateError(FloatingPointError):
    def __init__(self, iteration: int):
        super().__init__(f"iterate became non-finite at iteration {iteration}")
        self.iteration = iteration


# --------------------------------------------------------------------------
# Hyperparameter formulas


def _k_formula(m: int, T: float, delta: float) -> int:
    return math.ceil(
        m
        * (1.0 + math.log(m)) ** 0.75
        * math.sqrt(1.0 + math.log(1.0 / delta))
        * math.sqrt(1.0 + math.log(T))
        / T**0.25
    )


def recommended_k(m: int, T: float, delta: float) -> int:
    """Constraint minibatch size for the p-update, capped at ``m``."""
    if not (m >= 1 and T >= 1 and 0 < delta < 1):
        raise ValueError("recommended_k needs m >= 1, T >= 1 and delta in (0, 1)")
    return min(_k_formula(m, T, delta), m)


def recommended_eta_light(metadata, domain: Domain, m: int, T: float, gamma: float) -> float:
    D = domain.diameter_bound
    denom = (metadata.G_f + gamma * metadata.G_g + gamma * metadata.L_g * D) * math.sqrt(T)
    if denom <= 0:
        raise ValueError("step size formula has a zero denominator")
    return math.sqrt(1.0 + math.log(m)) * D / denom


def recommended_eta_full(metadata, domain: Domain, T: float, gamma: float) -> float:
    denom = (metadata.G_f + gamma * metadata.G_g) * math.sqrt(T)
    if denom <= 0:
        raise ValueError("step size formula has a zero denominator")
    return domain.diameter_bound / denom


def schedule_from_tau(tau: float, m: int) -> tuple[int, int]:
    """Phase lengths ``(ceil(m tau^2), ceil(tau^3))`` for the two-phase solver."""
    if tau < 1:
        raise ValueError("tau must be at least 1")
    return math.ceil(m * tau * tau), math.ceil(tau**3)


def mid_eta_p(lam: float, gamma: float, L_g: float) -> float:
    if lam <= 0 or gamma <= 0 or L_g <= 0:
        raise ValueError("p step size needs positive lambda, gamma and L_g")
    return lam / (2.0 * gamma * gamma * L_g * L_g)


# --------------------------------------------------------------------------
# Config and results


@dataclass(frozen=True)
class SolverConfig:
    """Hyperparameters for one run.

    Unset step sizes, ``gamma`` and ``k`` fall back to the closed-form
    defaults for the chosen algorithm. ``step_schedule`` is one of
    ``constant`` (``eta_w``), ``inv_sqrt`` (``eta_w / sqrt(t)``) or ``inv_t``
    (``1 / (schedule_lambda * t)``). ``clock="virtual"`` charges abstract
    work units instead of reading the wall clock, which keeps traces and
    automatic minibatching reproducible.
    """

    algorithm: str = "full"
    T: int = 1000
    T1: int | None = None
    T2: int | None = None
    tau: float | None = None
    eta_w: float | None = None
    eta_p: float | None = None
    gamma: float | None = None
    k: int = 0
    k_f: int = 1
    delta: float = 0.1
    step_schedule: str | None = None
    schedule_lambda: float | None = None
    final_projection: bool = True
    seed: int = 0
    trace_every: int = 0
    aggregate: int | None = None
    clock: str = "virtual"
    nu: float = 0.999
    w0: tuple[float, ...] | None = None
    record_iterates: bool = False

    def __post_init__(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        if self.step_schedule is not None and self.step_schedule not in SCHEDULES:
            raise ValueError(f"unknown step schedule {self.step_schedule!r}")
        if self.clock not in CLOCKS:
            raise ValueError(f"unknown clock {self.clock!r}")
        for name in ("eta_w", "eta_p", "gamma"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be positive")
        if self.step_schedule == "inv_t" and self.schedule_lambda is not None and not self.schedule_lambda > 0:
            raise ValueError("inv_t schedule requires lambda > 0")
        if self.T < 1 or self.k < 0 or self.k_f < 1 or self.trace_every < 0:
            raise ValueError("T, k_f must be positive and k, trace_every nonnegative")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")


@dataclass
class TraceRecord:
    iteration: int
    cumulative_constraint_checks: int
    objective_of_projected_average: float
    max_violation_of_average: float
    k_f: int
    k_g: int
    k_p: int
    p_entropy: float
    elapsed_ns: int


@dataclass
class SolverResult:
    average_iterate: Vector
    projected_iterate: Vector
    final_objective: float
    final_violation: float
    total_constraint_checks: int
    total_objective_samples: int
    wall_time: float
    trace: list[TraceRecord]
    algorithm: str
    gamma: float
    setup_checks: int = 0
    projection_calls: int = 0
    max_staleness: int = 0
    warnings: list[str] = field(default_factory=list)
    iterates: list[Vector] | None = None
    p: Vector | None = None


# --------------------------------------------------------------------------
# Shared run state


class _VirtualClock:
    """Deterministic clock advanced by charged work units."""

    def __init__(self) -> None:
        self.units = 0

    def now(self) -> int:
        return self.units

    def charge(self, units: float) -> None:
        self.units += units if type(units) is int else math.ceil(units)

    def elapsed(self, excluded_ns: int) -> int:
        return self.units


class _WallClock:
    def __init__(self) -> None:
        self.start = time.perf_counter_ns()

    @staticmethod
    def now() -> int:
        return time.perf_counter_ns()

    def charge(self, units: float) -> None:
        pass

    def elapsed(self, excluded_ns: int) -> int:
        return time.perf_counter_ns() - self.start - excluded_ns


class _Run:
    def __init__(self, problem: Problem, config: SolverConfig, rng, total_iterations: int):
        self.problem = problem
        self.config = config
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.counter = CheckCounter()
        self.clock = _VirtualClock() if config.clock == "virtual" else _WallClock()
        self.started = time.perf_counter()
        self.warnings: list[str] = []
        self.gamma = self._resolve_gamma()
        self.constraints: AnyConstraintSet = (
            aggregate(problem.constraints, config.aggregate)
            if config.aggregate
            else problem.constraints
        )
        self.m = self.constraints.count
        self.total = total_iterations
        self.every = config.trace_every or max(1, total_iterations // 100)
        self.trace: list[TraceRecord] = []
        self.trace_ns = 0
        self.sum = np.zeros(problem.dim)
        self.n_avg = 0
        self.objective_samples = 0
        self.projection_calls = 0
        self.setup_checks = 0
        self.iterates: list[Vector] | None = [] if config.record_iterates else None

    def _resolve_gamma(self) -> float:
        estimate: GammaEstimate | None = self.problem.gamma_estimate()
        gamma = self.config.gamma
        if gamma is None:
            if estimate is None:
                raise ValueError("problem has no default gamma; pass SolverConfig.gamma")
            return estimate.gamma
        if estimate is not None:
            bound = self.problem.metadata.L_f / estimate.rho
            if gamma <= bound:
                self.warnings.append(
                    f"gamma={gamma:g} does not exceed L_f/rho={bound:g}; "
                    "minimizers of the penalized objective may be infeasible"
                )
        user_gamma(gamma)
        return float(gamma)

    def start_point(self) -> Vector:
        if self.config.w0 is not None:
            w = np.array(self.config.w0, dtype=float)
        else:
            w = self.problem.start()
        return project_domain(self.problem.domain, w)

    def schedule(self, default: str, eta_w: float | None, lam: float | None = None):
        kind = self.config.step_schedule or default
        if kind == "constant":
            eta = float(eta_w)
            return lambda t: eta
        if kind == "inv_sqrt":
            eta = float(eta_w)
            return lambda t: eta / math.sqrt(t)
        lam = self.config.schedule_lambda or lam or self.problem.metadata.lam
        if not lam or lam <= 0:
            raise ValueError("inv_t schedule requires lambda > 0")
        return lambda t: 1.0 / (lam * t)

    def accumulate(self, w: Vector) -> None:
        self.sum += w
        self.n_avg += 1
        if self.iterates is not None:
            self.iterates.append(w.copy())

    def reset_average(self) -> None:
        self.sum[:] = 0.0
        self.n_avg = 0
        if self.iterates is not None:
            self.iterates.clear()

    def average(self) -> Vector:
        return self.sum / self.n_avg

    def sample_objective(self, w: Vector, k_f: int) -> Vector:
        oracle = self.problem.objective
        g = oracle.sample_subgradient(w, self.rng)
        self.objective_samples += k_f
        if k_f == 1:
            self.clock.charge(oracle.cost_units)
            return g
        for _ in range(k_f - 1):
            g = g + oracle.sample_subgradient(w, self.rng)
        g /= k_f
        self.clock.charge(k_f * oracle.cost_units)
        return g

    def record(self, t: int, sizes: tuple[int, int, int], entropy: float) -> None:
        t0 = time.perf_counter_ns()
        avg = self.average()
        projected = project_feasible(self.problem, avg)
        objective = self.problem.objective.full_value(projected)
        violation = self.problem.constraints.max_violation(avg)
        self.trace.append(
            TraceRecord(
                iteration=t,
                cumulative_constraint_checks=self.counter.count,
                objective_of_projected_average=objective,
                max_violation_of_average=violation,
                k_f=sizes[0],
                k_g=sizes[1],
                k_p=sizes[2],
                p_entropy=entropy,
                elapsed_ns=0,
            )
        )
        self.trace_ns += time.perf_counter_ns() - t0
        self.trace[-1].elapsed_ns = self.clock.elapsed(self.trace_ns)

    def due(self, t: int) -> bool:
        return t % self.every == 0 or t == self.total

    def finish(self, algorithm: str, state: SamplingState | None = None) -> SolverResult:
        avg = self.average()
        if self.config.final_projection:
            projected = project_feasible(self.problem, avg)
            self.projection_calls += 1
        else:
            projected = avg.copy()
        return SolverResult(
            average_iterate=avg,
            projected_iterate=projected,
            final_objective=self.problem.objective.full_value(projected),
            final_violation=self.problem.constraints.max_violation(projected),
            total_constraint_checks=self.counter.count,
            total_objective_samples=self.objective_samples,
            wall_time=time.perf_counter() - self.started,
            trace=self.trace,
            algorithm=algorithm,
            gamma=self.gamma,
            setup_checks=self.setup_checks,
            projection_calls=self.projection_calls,
            max_staleness=state.max_staleness_seen if state is not None else 0,
            warnings=self.warnings,
            iterates=self.iterates,
            p=state.p.copy() if state is not None else None,
        )

    def init_sampling(self, w: Vector, start: int) -> SamplingState:
        before = self.counter.count
        mu = np.maximum(self.constraints.evaluate_all(w, self.counter), 0.0)
        self.setup_checks += self.counter.count - before
        self.clock.charge(self.counter.count - before)
        return SamplingState.uniform(self.m, mu, start=start)


def _effective_m(problem: Problem, config: SolverConfig) -> int:
    m = problem.constraints.count
    if not config.aggregate:
        return m
    return len(range(0, m, -(-m // config.aggregate)))


def _check_finite(w: Vector, t: int) -> None:
    if not math.isfinite(float(w.sum())):
        raise NonFiniteIterateError(t)


_NAN = float("nan")


# --------------------------------------------------------------------------
# FullTouch


def _full_steps(run: _Run, w: Vector, t_from: int, t_to: int, step, k_f: int) -> Vector:
    """FullTouch iterations ``t_from..t_to`` on the penalized objective; returns the last iterate."""
    cs = run.constraints
    domain = run.problem.domain
    counter = run.counter
    gamma = run.gamma
    checks_per_iteration = run.problem.constraints.count
    sizes = (k_f, checks_per_iteration, 0)
    for t in range(t_from, t_to + 1):
        run.accumulate(w)
        grad = run.sample_objective(w, k_f)
        vals = cs.evaluate_all(w, counter)
        run.clock.charge(checks_per_iteration)
        i = int(vals.argmax())
        if vals[i] > 0.0:
            _, idx, coef = cs.value_and_row(i, w)
            grad[idx] += gamma * coef
        w = project_domain(domain, w - step(t) * grad)
        _check_finite(w, t)
        if run.due(t):
            run.record(t, sizes, _NAN)
    return w


def solve_full(problem: Problem, config: SolverConfig, rng=None) -> SolverResult:
    """Penalized SGD that checks every constraint at every iteration."""
    run = _Run(problem, config, rng, config.T)
    eta = config.eta_w or recommended_eta_full(problem.metadata, problem.domain, config.T, run.gamma)
    step = run.schedule("constant", eta)
    _full_steps(run, run.start_point(), 1, config.T, step, config.k_f)
    return run.finish("full")


# --------------------------------------------------------------------------
# LightTouch


def solve_light(problem: Problem, config: SolverConfig, rng=None) -> SolverResult:
    """Stochastic constraint sampling with a learned distribution over constraints.

    Each iteration checks one constraint drawn from ``p`` for the w-step and
    ``k`` uniformly drawn constraints for the centered p-step. Falls back to
    :func:`solve_full` when the recommended ``k`` exceeds ``m``.
    """
    m = _effective_m(problem, config)
    k = config.k or _k_formula(m, config.T, config.delta)
    if k > m:
        result = solve_full(problem, replace(config, algorithm="full"), rng)
        result.warnings.append(f"k={k} exceeds m={m}; ran FullTouch instead")
        return result

    run = _Run(problem, config, rng, config.T)
    m = run.m
    cs = run.constraints
    domain = problem.domain
    counter = run.counter
    gamma = run.gamma
    rng = run.rng
    eta = config.eta_w or recommended_eta_light(problem.metadata, domain, m, config.T, gamma)
    eta_p = config.eta_p or eta
    step = run.schedule("constant", eta)
    k_f = config.k_f
    sizes = (k_f, 1, k)

    w = run.start_point()
    state = run.init_sampling(w, start=0)
    for t in range(1, config.T + 1):
        run.accumulate(w)
        grad = run.sample_objective(w, k_f)
        i = sample_constraint(state, rng)
        value, idx, coef = cs.value_and_row(i, w, counter)
        if value > 0.0:
            grad[idx] += gamma * coef
        w_next = project_domain(domain, w - step(t) * grad)
        _check_finite(w_next, t)

        subset = sample_without_replacement(m, k, rng)
        grad_p = centered_supergradient(state, cs, w, subset, gamma, t, counter)
        multiplicative_update(state, grad_p, eta_p)
        run.clock.charge(1 + k + m)
        w = w_next
        if run.due(t):
            run.record(t, sizes, state.entropy())
    return run.finish("light", state)


# --------------------------------------------------------------------------
# MidTouch


def solve_mid(problem: Problem, config: SolverConfig, rng=None) -> SolverResult:
    """Two-phase solver for strongly convex objectives.

    Phase one runs ``T1`` FullTouch steps with step ``1/(lambda t)``. Phase two
    restarts from the phase-one average and runs ``T2`` LightTouch-style steps
    that check one sampled and one uniform constraint each, continuing the
    step-size clock from ``T1``. Only phase-two iterates are averaged.
    """
    lam = config.schedule_lambda or problem.metadata.lam
    if not lam > 0:
        raise ValueError("MidTouch needs a strongly convex objective (lambda > 0)")
    if config.T1 is not None and config.T2 is not None:
        T1, T2 = config.T1, config.T2
    elif config.tau is not None:
        T1, T2 = schedule_from_tau(config.tau, _effective_m(problem, config))
    else:
        raise ValueError("MidTouch needs (T1, T2) or tau")

    run = _Run(problem, config, rng, T1 + T2)
    m = run.m
    cs = run.constraints
    domain = problem.domain
    counter = run.counter
    gamma = run.gamma
    rng = run.rng
    eta_p = config.eta_p or mid_eta_p(lam, gamma, problem.metadata.L_g)
    step = run.schedule("inv_t", None, lam)
    k_f = config.k_f

    w = run.start_point()
    if T1 > 0:
        _full_steps(run, w, 1, T1, step, k_f)
        w = project_domain(domain, run.average())
    run.reset_average()

    state = run.init_sampling(w, start=T1)
    sizes = (k_f, 1, 1)
    for t in range(T1 + 1, T1 + T2 + 1):
        run.accumulate(w)
        grad = run.sample_objective(w, k_f)
        i = sample_constraint(state, rng)
        value, idx, coef = cs.value_and_row(i, w, counter)
        if value > 0.0:
            grad[idx] += gamma * coef
        w_next = project_domain(domain, w - step(t) * grad)
        _check_finite(w_next, t)

        subset = sample_without_replacement(m, 1, rng)
        grad_p = centered_supergradient(state, cs, w, subset, gamma, t, counter)
        multiplicative_update(state, grad_p, eta_p)
        run.clock.charge(2 + m)
        w = w_next
        if run.due(t):
            run.record(t, sizes, state.entropy())
    return run.finish("mid", state)


# --------------------------------------------------------------------------
# Practical LightTouch


def solve_practical(problem: Problem, config: SolverConfig, rng=None) -> SolverResult:
    """LightTouch with decreasing w-steps and automatically sized minibatches.

    Minibatch sizes ``(k_f, k_g, k_p)`` are re-chosen every iteration from
    running variance and cost estimates; the constraint part of the w-step
    averages ``k_g`` constraints drawn i.i.d. from ``p``.
    """
    run = _Run(problem, config, rng, config.T)
    m = run.m
    cs = run.constraints
    domain = problem.domain
    oracle = problem.objective
    counter = run.counter
    clock = run.clock
    gamma = run.gamma
    rng = run.rng
    d = problem.dim
    meta = problem.metadata
    eta_w = config.eta_w or domain.diameter_bound / (meta.G_f + gamma * meta.G_g)
    eta_p = config.eta_p or recommended_eta_light(meta, domain, m, config.T, gamma)
    step = run.schedule("inv_sqrt", eta_w)
    estimates = autotune.EstimatorState(config.nu)
    sample_cost = 1.0 + math.log2(m) if m > 1 else 1.0

    w = run.start_point()
    state = run.init_sampling(w, start=0)
    for t in range(1, config.T + 1):
        run.accumulate(w)
        eta_t = step(t)
        if t <= autotune.WARMUP_ITERATIONS:
            k_f, k_g, k_p = autotune.warmup_sizes(m)
        else:
            k_f, k_g, k_p = autotune.allocate_from(estimates, eta_t, eta_p, m)

        c0 = clock.now()
        f_samples = np.empty((k_f, d))
        for j in range(k_f):
            f_samples[j] = oracle.sample_subgradient(w, rng)
        clock.charge(k_f * oracle.cost_units)
        run.objective_samples += k_f
        c1 = clock.now()
        estimates.observe_f(f_samples, c1 - c0)

        g_samples = np.zeros((k_g, d))
        raw = counter.count
        for j in range(k_g):
            i = sample_constraint(state, rng)
            value, idx, coef = cs.value_and_row(i, w, counter)
            if value > 0.0:
                g_samples[j, idx] = gamma * coef
        clock.charge(k_g * sample_cost + counter.count - raw)
        c2 = clock.now()
        estimates.observe_g(g_samples, c2 - c1)

        grad = f_samples.mean(axis=0) + g_samples.mean(axis=0)
        w_next = project_domain(domain, w - eta_t * grad)
        _check_finite(w_next, t)

        raw = counter.count
        subset = sample_without_replacement(m, k_p, rng)
        grad_p = centered_supergradient(state, cs, w, subset, gamma, t, counter)
        clock.charge(counter.count - raw)
        c3 = clock.now()
        estimates.observe_p(grad_p.previous - state.mu[subset], gamma, m, k_p, c3 - c2)
        multiplicative_update(state, grad_p, eta_p)
        clock.charge(m)
        w = w_next
        if run.due(t):
            run.record(t, (k_f, k_g, k_p), state.entropy())
    return run.finish("practical", state)


# --------------------------------------------------------------------------
# Projected SGD baseline


def solve_projected_sgd(problem: Problem, config: SolverConfig, rng=None) -> SolverResult:
    """SGD that projects onto the full feasible set after every step."""
    run = _Run(problem, config, rng, config.T)
    # shares FullTouch's default step so the two differ only in constraint handling
    eta = config.eta_w or recommended_eta_full(problem.metadata, problem.domain, config.T, run.gamma)
    step = run.schedule("constant", eta)
    domain = problem.domain
    k_f = config.k_f
    sizes = (k_f, 0, 0)

    w = project_feasible(problem, run.start_point())
    run.projection_calls += 1
    for t in range(1, config.T + 1):
        run.accumulate(w)
        grad = run.sample_objective(w, k_f)
        w = project_feasible(problem, project_domain(domain, w - step(t) * grad))
        run.projection_calls += 1
        _check_finite(w, t)
        if run.due(t):
            run.record(t, sizes, _NAN)
    return run.finish("projected_sgd")


_SOLVERS = {
    "full": solve_full,
    "light": solve_light,
    "mid": solve_mid,
    "practical": solve_practical,
    "projected_sgd": solve_projected_sgd,
}


def solve(problem: Problem, config: SolverConfig, rng=None) -> SolverResult:
    return _SOLVERS[config.algorithm](problem, config, rng)
